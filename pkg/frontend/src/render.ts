/**
 * DOM rendering for the workbench. Every displayed number is formatted
 * straight from an API response field; no score or box is computed here.
 */

import type { ClassifyResponse, DiffOut, ExplanationOut } from "./api.js";
import { colorsFor } from "./palette.js";

export const SCORE_DECIMALS = 2;

export function formatScore(value: number): string {
  return value.toFixed(SCORE_DECIMALS);
}

export interface ExplanationView {
  root: HTMLElement;
  /** one overlay element per part box, in vocabulary order */
  overlays: HTMLElement[];
  /** one score row per part, in vocabulary order */
  rows: HTMLElement[];
}

/**
 * Render one class's explanation: colored box overlays over the image area
 * plus a per-part score table. Hovering a descriptor row highlights its box
 * (same color key). With boxes missing the view degrades to scores only.
 */
export function renderExplanation(
  doc: Document,
  resp: ClassifyResponse,
  className: string,
  parts: string[],
): ExplanationView {
  const expl = resp.explanations.find((e) => e.class_name === className);
  if (!expl) {
    throw new Error(`response has no explanation for class ${className}`);
  }
  const colors = colorsFor(parts);

  const root = doc.createElement("div");
  root.className = "explanation";
  root.dataset.className = className;

  const header = doc.createElement("div");
  header.className = "explanation-header";
  header.textContent = `${expl.class_name} — softmax ${formatScore(expl.softmax)}, logit ${formatScore(expl.total_logit)}`;
  root.appendChild(header);

  const stage = doc.createElement("div");
  stage.className = "image-stage";
  root.appendChild(stage);

  const table = doc.createElement("div");
  table.className = "part-scores";
  root.appendChild(table);

  const overlays: HTMLElement[] = [];
  const rows: HTMLElement[] = [];

  for (const part of expl.parts) {
    const color = colors.get(part.part) ?? "#888888";

    let overlay: HTMLElement | null = null;
    if (part.box) {
      overlay = doc.createElement("div");
      overlay.className = "box-overlay";
      overlay.dataset.part = part.part;
      overlay.style.borderColor = color;
      const [x1, y1, x2, y2] = part.box.pixel_corners;
      overlay.style.left = `${x1}px`;
      overlay.style.top = `${y1}px`;
      overlay.style.width = `${x2 - x1}px`;
      overlay.style.height = `${y2 - y1}px`;
      stage.appendChild(overlay);
      overlays.push(overlay);
    }

    const row = doc.createElement("div");
    row.className = "part-row";
    row.dataset.part = part.part;
    row.style.color = color;
    const scoreCell = doc.createElement("span");
    scoreCell.className = "part-score";
    scoreCell.textContent = formatScore(part.score);
    const phraseCell = doc.createElement("span");
    phraseCell.className = "part-phrase";
    phraseCell.textContent = `${part.part}: ${part.phrase}`;
    row.append(scoreCell, phraseCell);

    if (overlay) {
      const target = overlay;
      row.addEventListener("mouseenter", () => target.classList.add("highlight"));
      row.addEventListener("mouseleave", () => target.classList.remove("highlight"));
    }
    table.appendChild(row);
    rows.push(row);
  }
  return { root, overlays, rows };
}

/** Ranked class list with the class count in the header. */
export function renderRanking(doc: Document, resp: ClassifyResponse): HTMLElement {
  const root = doc.createElement("div");
  root.className = "ranking";

  const header = doc.createElement("div");
  header.className = "ranking-header";
  header.textContent = `${resp.class_count} classes`;
  root.appendChild(header);

  for (const entry of resp.ranked) {
    const row = doc.createElement("div");
    row.className = "ranking-row";
    row.dataset.className = entry.class_name;
    row.textContent = `${entry.class_name} ${formatScore(entry.softmax)}`;
    root.appendChild(row);
  }
  return root;
}

/** Diff panel listing what an edit changed, one row per change. */
export function renderDiff(doc: Document, diff: DiffOut): HTMLElement {
  const root = doc.createElement("div");
  root.className = "diff-panel";
  for (const name of diff.added_classes) {
    const row = doc.createElement("div");
    row.className = "diff-row diff-added";
    row.textContent = `+ class ${name}`;
    root.appendChild(row);
  }
  for (const name of diff.removed_classes) {
    const row = doc.createElement("div");
    row.className = "diff-row diff-removed";
    row.textContent = `- class ${name}`;
    root.appendChild(row);
  }
  for (const change of diff.changed_phrases) {
    const row = doc.createElement("div");
    row.className = "diff-row diff-changed";
    row.dataset.part = change.part;
    row.dataset.className = change.class_name;
    row.textContent = `~ ${change.class_name} / ${change.part}: "${change.before}" -> "${change.after}"`;
    root.appendChild(row);
  }
  return root;
}

export interface DeltaRow {
  part: string;
  arrow: "▲" | "▼" | "•";
  beforeText: string;
  afterText: string;
}

/** Side-by-side pre/post per-part comparison rows for one class. */
export function renderScoreDeltas(
  doc: Document,
  deltas: { part: string; before: number | null; after: number; direction: string }[],
): HTMLElement {
  const root = doc.createElement("div");
  root.className = "delta-panel";
  for (const d of deltas) {
    const row = doc.createElement("div");
    row.className = "delta-row";
    row.dataset.part = d.part;
    const arrow = d.direction === "up" ? "▲" : d.direction === "down" ? "▼" : "•";
    row.dataset.direction = d.direction;
    row.textContent =
      `${d.part} ${d.before === null ? "—" : formatScore(d.before)} ${arrow} ${formatScore(d.after)}`;
    root.appendChild(row);
  }
  return root;
}

/** Scores-only fallback when a response carries no explanations. */
export function renderScoreFallback(doc: Document, expl: ExplanationOut): HTMLElement {
  const root = doc.createElement("div");
  root.className = "explanation fallback";
  for (const part of expl.parts) {
    const row = doc.createElement("div");
    row.className = "part-row";
    row.textContent = `${part.part}: ${formatScore(part.score)}`;
    root.appendChild(row);
  }
  return root;
}
