/**
 * The interaction flows: classify an image, stage and submit descriptor
 * edits, add a class by cloning, and undo to a previous library version.
 *
 * Edits are optimistic: the server rejects a submission whose base version
 * is no longer the head, and the caller is handed a rebase callback.
 */

import { ApiClient, ConflictError, type ClassifyResponse, type EditOp, type EditResponse } from "./api.js";
import {
  adoptLibrary,
  discardEdits,
  initialState,
  popVersion,
  recordClassify,
  setImage,
  stageEdit,
  undoVersionId,
  type WorkbenchState,
} from "./state.js";

export interface SubmitResult {
  state: WorkbenchState;
  edit: EditResponse;
  classify: ClassifyResponse;
}

export class RebaseRequired extends Error {
  constructor(public conflict: ConflictError) {
    super(`edit base is stale: ${conflict.detail}`);
  }
}

export class Workbench {
  state: WorkbenchState;

  constructor(private api: ApiClient, initialLibrary: Parameters<typeof initialState>[0]) {
    this.state = initialState(initialLibrary);
  }

  static async connect(api: ApiClient): Promise<Workbench> {
    return new Workbench(api, await api.headLibrary());
  }

  async showImage(imageRef: string): Promise<ClassifyResponse> {
    this.state = setImage(this.state, imageRef);
    const resp = await this.api.classify({
      image_ref: imageRef,
      library_version: this.state.library.id,
    });
    this.state = recordClassify(this.state, resp);
    return resp;
  }

  draftEdit(className: string, part: string, phrase: string): void {
    this.state = stageEdit(this.state, className, part, phrase);
  }

  cancelDrafts(): void {
    this.state = discardEdits(this.state);
  }

  /**
   * Submit all pending edits against the active version, then re-classify
   * the current image against the new version so the view can show the
   * before/after comparison.
   */
  async submitEdits(): Promise<SubmitResult> {
    if (this.state.pendingEdits.size === 0) {
      throw new Error("no pending edits to submit");
    }
    const imageRef = this.state.imageRef;
    if (!imageRef) {
      throw new Error("no image loaded");
    }
    const ops: EditOp[] = [...this.state.pendingEdits.values()].map((e) => ({
      op: "edit",
      class_name: e.className,
      part: e.part,
      phrase: e.phrase,
    }));
    let editResp: EditResponse;
    try {
      editResp = await this.api.edit(this.state.library.id, ops);
    } catch (err) {
      if (err instanceof ConflictError) throw new RebaseRequired(err);
      throw err;
    }
    const library = await this.api.getLibrary(editResp.version_id);
    this.state = adoptLibrary(this.state, library);
    const classifyResp = await this.api.classify({
      image_ref: imageRef,
      library_version: editResp.version_id,
    });
    this.state = recordClassify(this.state, classifyResp);
    return { state: this.state, edit: editResp, classify: classifyResp };
  }

  /**
   * Clone a class as its own commit (the interactive add-class flow clones
   * first, then the user edits the copy part by part).
   */
  async cloneClass(srcClass: string, newName: string): Promise<EditResponse> {
    let editResp: EditResponse;
    try {
      editResp = await this.api.cloneClass(this.state.library.id, srcClass, newName);
    } catch (err) {
      if (err instanceof ConflictError) throw new RebaseRequired(err);
      throw err;
    }
    const library = await this.api.getLibrary(editResp.version_id);
    this.state = adoptLibrary(this.state, library);
    return editResp;
  }

  /**
   * Add a class by cloning an existing one, applying the per-part draft
   * phrases in the same commit, then re-classifying over the grown library.
   */
  async addClass(
    srcClass: string,
    newName: string,
    phrases: Record<string, string>,
  ): Promise<SubmitResult> {
    const imageRef = this.state.imageRef;
    if (!imageRef) {
      throw new Error("no image loaded");
    }
    const ops: EditOp[] = [{ op: "clone", src: srcClass, new_name: newName }];
    for (const [part, phrase] of Object.entries(phrases)) {
      ops.push({ op: "edit", class_name: newName, part, phrase });
    }
    let editResp: EditResponse;
    try {
      editResp = await this.api.edit(this.state.library.id, ops);
    } catch (err) {
      if (err instanceof ConflictError) throw new RebaseRequired(err);
      throw err;
    }
    const library = await this.api.getLibrary(editResp.version_id);
    this.state = adoptLibrary(this.state, library);
    const classifyResp = await this.api.classify({
      image_ref: imageRef,
      library_version: editResp.version_id,
    });
    this.state = recordClassify(this.state, classifyResp);
    return { state: this.state, edit: editResp, classify: classifyResp };
  }

  /** Rebase pending drafts onto the current server head after a conflict. */
  async rebaseOntoHead(): Promise<void> {
    const head = await this.api.headLibrary();
    const drafts = [...this.state.pendingEdits.values()];
    this.state = adoptLibrary(this.state, head);
    for (const d of drafts) {
      if (d.className in head.classes) {
        this.state = stageEdit(this.state, d.className, d.part, d.phrase);
      }
    }
  }

  /** Return to the previous library version (exact id) and re-classify. */
  async undo(): Promise<ClassifyResponse | null> {
    const previous = undoVersionId(this.state);
    if (previous === null) return null;
    const library = await this.api.getLibrary(previous);
    this.state = popVersion(this.state, library);
    if (!this.state.imageRef) return null;
    const resp = await this.api.classify({
      image_ref: this.state.imageRef,
      library_version: previous,
    });
    this.state = recordClassify(this.state, resp);
    return resp;
  }
}
