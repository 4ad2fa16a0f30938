/**
 * Typed client for the classification/editing HTTP API.
 *
 * The workbench computes nothing locally: every number it displays comes
 * from a response field of this API.
 */

export interface BoxOut {
  cx: number;
  cy: number;
  w: number;
  h: number;
  pixel_corners: [number, number, number, number];
}

export interface PartOut {
  part: string;
  phrase: string;
  score: number;
  box: BoxOut;
}

export interface ExplanationOut {
  class_name: string;
  total_logit: number;
  softmax: number;
  parts: PartOut[];
}

export interface RankedOut {
  class_name: string;
  softmax: number;
  total_logit: number;
}

export interface ClassifyResponse {
  request_id: string;
  library_version: string;
  image_ref: string;
  class_count: number;
  ranked: RankedOut[];
  explanations: ExplanationOut[];
}

export interface ClassifyRequest {
  image_ref: string;
  library_version: string;
  top_k?: number;
  include_explanations?: boolean;
  image_size?: [number, number];
}

export type EditOp =
  | { op: "edit"; class_name: string; part: string; phrase: string }
  | { op: "clone"; src: string; new_name: string }
  | { op: "add"; class_name: string; phrases: Record<string, string> }
  | { op: "delete"; class_name: string };

export interface DiffOut {
  added_classes: string[];
  removed_classes: string[];
  changed_phrases: { class_name: string; part: string; before: string; after: string }[];
}

export interface EditResponse {
  version_id: string;
  parent: string;
  diff: DiffOut;
}

export interface LibraryOut {
  id: string;
  parent: string | null;
  is_head: boolean;
  parts: string[];
  classes: Record<string, Record<string, string>>;
}

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class ConflictError extends ApiError {
  constructor(detail: string) {
    super(409, detail);
  }
}

async function parseError(resp: Response): Promise<never> {
  let detail = resp.statusText;
  try {
    const body = (await resp.json()) as { detail?: string };
    if (body.detail) detail = body.detail;
  } catch {
    // keep the status text
  }
  if (resp.status === 409) throw new ConflictError(detail);
  throw new ApiError(resp.status, detail);
}

export class ApiClient {
  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, {
      headers: { "Content-Type": "application/json" },
      ...init,
    });
    if (!resp.ok) await parseError(resp);
    return (await resp.json()) as T;
  }

  classify(req: ClassifyRequest): Promise<ClassifyResponse> {
    return this.request<ClassifyResponse>("/classify", {
      method: "POST",
      body: JSON.stringify(req),
    });
  }

  listLibraries(): Promise<string[]> {
    return this.request<string[]>("/libraries");
  }

  getLibrary(versionId: string): Promise<LibraryOut> {
    return this.request<LibraryOut>(`/libraries/${versionId}`);
  }

  edit(baseVersion: string, ops: EditOp[]): Promise<EditResponse> {
    return this.request<EditResponse>(`/libraries/${baseVersion}/edit`, {
      method: "POST",
      body: JSON.stringify({ ops }),
    });
  }

  cloneClass(baseVersion: string, src: string, newName: string): Promise<EditResponse> {
    return this.request<EditResponse>(`/libraries/${baseVersion}/clone-class`, {
      method: "POST",
      body: JSON.stringify({ src, new_name: newName }),
    });
  }

  async headLibrary(): Promise<LibraryOut> {
    const versions = await this.listLibraries();
    for (const id of versions.slice().reverse()) {
      const lib = await this.getLibrary(id);
      if (lib.is_head) return lib;
    }
    throw new ApiError(404, "no head library version");
  }
}
