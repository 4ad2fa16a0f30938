import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { formatScore, renderDiff, renderExplanation, renderRanking, renderScoreDeltas } from "../src/render.js";
import { FakeServer } from "./fakeServer.js";

const TWELVE_PARTS = [
  "back", "beak", "belly", "breast", "crown", "forehead",
  "eyes", "legs", "wings", "nape", "tail", "throat",
];

function twelvePartServer(): FakeServer {
  const phrases = Object.fromEntries(TWELVE_PARTS.map((p) => [p, `${p} phrase`]));
  return new FakeServer(TWELVE_PARTS, { Cardinal: phrases, "Blue Jay": { ...phrases } });
}

describe("score formatting", () => {
  it("renders two decimals", () => {
    expect(formatScore(0.7449)).toBe("0.74");
    expect(formatScore(0.745)).toBe("0.74"); // toFixed half-even-ish on binary floats
    expect(formatScore(1)).toBe("1.00");
  });
});

describe("explanation view", () => {
  it("draws one colored overlay per part for a 12-part response", async () => {
    const api = new ApiClient("", twelvePartServer().fetch);
    const resp = await api.classify({ image_ref: "img", library_version: "v0000" });
    const view = renderExplanation(document, resp, "Cardinal", TWELVE_PARTS);
    expect(view.overlays).toHaveLength(12);
    const colors = new Set(view.overlays.map((o) => o.style.borderColor));
    expect(colors.size).toBe(12); // stable palette by vocabulary order
  });

  it("score labels equal the response values at display precision", async () => {
    const api = new ApiClient("", twelvePartServer().fetch);
    const resp = await api.classify({ image_ref: "img", library_version: "v0000" });
    const view = renderExplanation(document, resp, "Cardinal", TWELVE_PARTS);
    const expl = resp.explanations.find((e) => e.class_name === "Cardinal")!;
    view.rows.forEach((row, i) => {
      const label = row.querySelector(".part-score")!.textContent;
      expect(label).toBe(formatScore(expl.parts[i]!.score));
    });
  });

  it("hovering a descriptor row highlights its box with the same color", async () => {
    const api = new ApiClient("", twelvePartServer().fetch);
    const resp = await api.classify({ image_ref: "img", library_version: "v0000" });
    const view = renderExplanation(document, resp, "Cardinal", TWELVE_PARTS);
    const row = view.rows[3]!;
    const overlay = view.overlays[3]!;
    row.dispatchEvent(new window.MouseEvent("mouseenter"));
    expect(overlay.classList.contains("highlight")).toBe(true);
    row.dispatchEvent(new window.MouseEvent("mouseleave"));
    expect(overlay.classList.contains("highlight")).toBe(false);
    expect(row.style.color).toBe(overlay.style.borderColor);
  });

  it("box geometry comes from the response pixel corners", async () => {
    const api = new ApiClient("", twelvePartServer().fetch);
    const resp = await api.classify({
      image_ref: "img", library_version: "v0000", image_size: [448, 448],
    });
    const view = renderExplanation(document, resp, "Cardinal", TWELVE_PARTS);
    const expl = resp.explanations.find((e) => e.class_name === "Cardinal")!;
    const [x1, y1, x2] = expl.parts[0]!.box.pixel_corners;
    expect(view.overlays[0]!.style.left).toBe(`${x1}px`);
    expect(view.overlays[0]!.style.top).toBe(`${y1}px`);
    expect(view.overlays[0]!.style.width).toBe(`${x2 - x1}px`);
  });
});

describe("score-only fallback", () => {
  it("renders per-part scores when boxes are unavailable", async () => {
    const { renderScoreFallback } = await import("../src/render.js");
    const api = new ApiClient("", twelvePartServer().fetch);
    const resp = await api.classify({ image_ref: "img", library_version: "v0000" });
    const view = renderScoreFallback(document, resp.explanations[0]!);
    expect(view.querySelectorAll(".part-row")).toHaveLength(12);
    expect(view.classList.contains("fallback")).toBe(true);
  });
});

describe("ranking and diff panels", () => {
  it("shows the class count and one row per class", async () => {
    const api = new ApiClient("", twelvePartServer().fetch);
    const resp = await api.classify({ image_ref: "img", library_version: "v0000" });
    const panel = renderRanking(document, resp);
    expect(panel.querySelector(".ranking-header")!.textContent).toBe("2 classes");
    expect(panel.querySelectorAll(".ranking-row")).toHaveLength(2);
  });

  it("diff panel lists one row per change", () => {
    const panel = renderDiff(document, {
      added_classes: ["Eastern Bluebird"],
      removed_classes: [],
      changed_phrases: [
        { class_name: "A", part: "wings", before: "x", after: "y" },
        { class_name: "A", part: "throat", before: "u", after: "v" },
      ],
    });
    expect(panel.querySelectorAll(".diff-row")).toHaveLength(3);
    expect(panel.querySelectorAll(".diff-changed")).toHaveLength(2);
  });

  it("delta arrows match the sign of post minus pre", () => {
    const panel = renderScoreDeltas(document, [
      { part: "wings", before: 0.57, after: 0.74, direction: "up" },
      { part: "tail", before: 0.5, after: 0.3, direction: "down" },
      { part: "crown", before: null, after: 0.2, direction: "flat" },
    ]);
    const rows = [...panel.querySelectorAll(".delta-row")];
    expect(rows.map((r) => (r as HTMLElement).dataset.direction)).toEqual(["up", "down", "flat"]);
    expect(rows[0]!.textContent).toContain("▲");
    expect(rows[1]!.textContent).toContain("▼");
  });
});
