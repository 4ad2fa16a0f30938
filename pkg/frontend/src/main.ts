/**
 * Browser entry point: wires the workbench flows to the page. Serve the
 * backend (`peeb serve`) and open index.html from the same origin or set
 * the base URL below.
 */

import { ApiClient } from "./api.js";
import { renderDiff, renderExplanation, renderRanking, renderScoreDeltas } from "./render.js";
import { scoreDeltas } from "./state.js";
import { RebaseRequired, Workbench } from "./workbench.js";

const api = new ApiClient("");

function byId(id: string): HTMLElement {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing #${id}`);
  return el;
}

async function refreshView(bench: Workbench): Promise<void> {
  const resp = bench.state.postEditResponse;
  if (!resp) return;
  const ranking = byId("ranking");
  ranking.replaceChildren(renderRanking(document, resp));

  const topClass = resp.ranked[0]?.class_name;
  const shown = bench.state.selectedClass ?? topClass;
  if (shown) {
    const view = renderExplanation(document, resp, shown, bench.state.library.parts);
    byId("explanation").replaceChildren(view.root);
    const deltas = scoreDeltas(bench.state, shown);
    byId("deltas").replaceChildren(renderScoreDeltas(document, deltas));
  }
}

async function boot(): Promise<void> {
  const bench = await Workbench.connect(api);
  byId("version").textContent = bench.state.library.id;

  byId("classify-btn").addEventListener("click", async () => {
    const imageRef = (byId("image-ref") as HTMLInputElement).value;
    await bench.showImage(imageRef);
    await refreshView(bench);
  });

  byId("stage-edit-btn").addEventListener("click", () => {
    const cls = (byId("edit-class") as HTMLInputElement).value;
    const part = (byId("edit-part") as HTMLInputElement).value;
    const phrase = (byId("edit-phrase") as HTMLInputElement).value;
    bench.draftEdit(cls, part, phrase);
    byId("pending-count").textContent = String(bench.state.pendingEdits.size);
  });

  byId("submit-btn").addEventListener("click", async () => {
    try {
      const result = await bench.submitEdits();
      byId("version").textContent = result.edit.version_id;
      byId("diff").replaceChildren(renderDiff(document, result.edit.diff));
      byId("pending-count").textContent = "0";
      await refreshView(bench);
    } catch (err) {
      if (err instanceof RebaseRequired) {
        byId("diff").textContent = "Edit conflict: base version moved. Rebase and retry.";
        await bench.rebaseOntoHead();
        byId("version").textContent = bench.state.library.id;
      } else {
        throw err;
      }
    }
  });

  byId("undo-btn").addEventListener("click", async () => {
    await bench.undo();
    byId("version").textContent = bench.state.library.id;
    await refreshView(bench);
  });
}

boot().catch((err) => {
  document.body.textContent = `workbench failed to start: ${err}`;
});
