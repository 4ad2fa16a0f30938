"""HTTP service exposing classification, explanation, descriptor editing,
and background training jobs; this is the contract the editing workbench
consumes.

Library versions are immutable snapshots forming an append-only chain.
Edits are optimistic: they name a base version, and a base that is no
longer the head is rejected with a conflict so the client can rebase.
"""

from __future__ import annotations

import threading
import traceback
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field

from fastapi import FastAPI, File, Form, HTTPException, UploadFile
from pydantic import BaseModel, Field

from . import descriptors as dsc
from .descriptors import DescriptorLibrary
from .errors import ConflictError, NotFoundError, PeebError, ValidationError
from .model import Pipeline


@dataclass
class LibraryVersion:
    id: str
    library: DescriptorLibrary
    parent: str | None


class LibraryStore:
    """Single-writer, multi-reader store of immutable library snapshots."""

    def __init__(self, initial: DescriptorLibrary):
        self._lock = threading.Lock()
        self._versions: dict[str, LibraryVersion] = {}
        self._counter = 0
        self.head_id = self._insert(initial, parent=None)

    def _insert(self, library: DescriptorLibrary, parent: str | None) -> str:
        version_id = f"v{self._counter:04d}"
        self._counter += 1
        self._versions[version_id] = LibraryVersion(version_id, library, parent)
        return version_id

    def get(self, version_id: str) -> LibraryVersion:
        if version_id not in self._versions:
            raise NotFoundError(f"unknown library version {version_id!r}")
        return self._versions[version_id]

    def commit(self, base_id: str, library: DescriptorLibrary) -> str:
        """Append a new version on top of base_id; stale bases conflict."""
        with self._lock:
            self.get(base_id)
            if base_id != self.head_id:
                raise ConflictError(
                    f"version {base_id!r} is no longer the head ({self.head_id!r}); rebase"
                )
            self.head_id = self._insert(library, parent=base_id)
            return self.head_id

    def versions(self) -> list[str]:
        return list(self._versions.keys())


@dataclass
class Job:
    id: str
    kind: str
    status: str = "queued"  # queued | running | done | error
    detail: str = ""
    result: dict = field(default_factory=dict)


class JobRegistry:
    def __init__(self):
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()

    def submit(self, kind: str, fn) -> Job:
        job = Job(id=uuid.uuid4().hex[:12], kind=kind)
        with self._lock:
            self._jobs[job.id] = job

        def run():
            job.status = "running"
            try:
                job.result = fn() or {}
                job.status = "done"
            except Exception as exc:  # jobs surface errors through the API
                job.status = "error"
                job.detail = f"{type(exc).__name__}: {exc}"
                traceback.print_exc()

        threading.Thread(target=run, daemon=True).start()
        return job

    def get(self, job_id: str) -> Job:
        if job_id not in self._jobs:
            raise NotFoundError(f"unknown job {job_id!r}")
        return self._jobs[job_id]


# ---------------------------------------------------------------------------
# wire schemas


class ClassifyRequest(BaseModel):
    image_ref: str
    library_version: str
    top_k: int | None = None
    include_explanations: bool = True
    image_size: tuple[int, int] = (224, 224)  # for pixel-space box corners


class BoxOut(BaseModel):
    cx: float
    cy: float
    w: float
    h: float
    pixel_corners: tuple[float, float, float, float]


class PartOut(BaseModel):
    part: str
    phrase: str
    score: float
    box: BoxOut


class ExplanationOut(BaseModel):
    class_name: str
    total_logit: float
    softmax: float
    parts: list[PartOut]


class RankedOut(BaseModel):
    class_name: str
    softmax: float
    total_logit: float


class ClassifyResponse(BaseModel):
    request_id: str
    library_version: str
    image_ref: str
    class_count: int
    ranked: list[RankedOut]
    explanations: list[ExplanationOut] = Field(default_factory=list)


class EditOp(BaseModel):
    op: str  # edit | clone | add | delete
    class_name: str | None = None
    part: str | None = None
    phrase: str | None = None
    src: str | None = None
    new_name: str | None = None
    phrases: dict[str, str] | None = None


class EditRequest(BaseModel):
    ops: list[EditOp]


class EditResponse(BaseModel):
    version_id: str
    parent: str
    diff: dict


class CloneRequest(BaseModel):
    src: str
    new_name: str


class LibraryOut(BaseModel):
    id: str
    parent: str | None
    is_head: bool
    parts: list[str]
    classes: dict[str, dict[str, str]]


class JobOut(BaseModel):
    id: str
    kind: str
    status: str
    detail: str
    result: dict


def _apply_ops(lib: DescriptorLibrary, ops: list[EditOp]) -> DescriptorLibrary:
    for op in ops:
        if op.op == "edit":
            if not (op.class_name and op.part and op.phrase is not None):
                raise ValidationError("edit op needs class_name, part, phrase")
            lib = dsc.edit_descriptor(lib, op.class_name, op.part, op.phrase)
        elif op.op == "clone":
            if not (op.src and op.new_name):
                raise ValidationError("clone op needs src and new_name")
            lib = dsc.clone_class(lib, op.src, op.new_name)
        elif op.op == "add":
            if not (op.class_name and op.phrases):
                raise ValidationError("add op needs class_name and phrases")
            lib = dsc.add_class(lib, op.class_name, op.phrases)
        elif op.op == "delete":
            if not op.class_name:
                raise ValidationError("delete op needs class_name")
            lib = dsc.delete_class(lib, op.class_name)
        else:
            raise ValidationError(f"unknown op {op.op!r}")
    return lib


def _http_error(exc: PeebError) -> HTTPException:
    if isinstance(exc, NotFoundError):
        return HTTPException(status_code=404, detail=str(exc))
    if isinstance(exc, ConflictError):
        return HTTPException(status_code=409, detail=str(exc))
    if isinstance(exc, ValidationError):
        return HTTPException(status_code=422, detail=str(exc))
    return HTTPException(status_code=400, detail=str(exc))


def create_app(pipeline: Pipeline, initial_library: DescriptorLibrary,
               trainer=None) -> FastAPI:
    """Build the service over a ready pipeline and an initial library.

    `trainer`, when given, is a zero-argument callable launched by the
    training job endpoint (kept injectable so tests stay fast).
    """
    app = FastAPI(title="peeb service", version="1.0")
    store = LibraryStore(initial_library)
    jobs = JobRegistry()
    recent_responses: OrderedDict[str, ClassifyResponse] = OrderedDict()

    app.state.library_store = store
    app.state.jobs = jobs

    def remember(resp: ClassifyResponse):
        recent_responses[resp.request_id] = resp
        while len(recent_responses) > 256:
            recent_responses.popitem(last=False)

    def run_classify(image, image_ref: str, library_version: str,
                     top_k: int | None, include_explanations: bool,
                     image_size: tuple[int, int]) -> ClassifyResponse:
        try:
            version = store.get(library_version)
            lib = version.library
            if len(lib) == 0:
                raise ValidationError("library has no classes")
            if top_k is not None and not 1 <= top_k <= len(lib):
                raise ValidationError(f"top_k must be in [1, {len(lib)}]")
            if tuple(lib.vocabulary.parts) != pipeline.model.config.parts:
                raise ConflictError("library vocabulary does not match the loaded model")
            explanations = pipeline.explain(image, lib)
        except PeebError as exc:
            raise _http_error(exc) from exc
        img_w, img_h = image_size
        ranked = [RankedOut(class_name=e.class_name, softmax=e.softmax_prob,
                            total_logit=e.total_logit) for e in explanations]
        expl_out = []
        if include_explanations:
            top = explanations[:top_k] if top_k else explanations
            for e in top:
                parts = [PartOut(
                    part=p.part, phrase=p.phrase, score=p.score,
                    box=BoxOut(cx=p.box.cx, cy=p.box.cy, w=p.box.w, h=p.box.h,
                               pixel_corners=p.box.to_pixel_corners(img_w, img_h)),
                ) for p in e.per_part]
                expl_out.append(ExplanationOut(class_name=e.class_name,
                                               total_logit=e.total_logit,
                                               softmax=e.softmax_prob, parts=parts))
        resp = ClassifyResponse(
            request_id=uuid.uuid4().hex[:12],
            library_version=library_version,
            image_ref=image_ref,
            class_count=len(lib),
            ranked=ranked[:top_k] if top_k else ranked,
            explanations=expl_out,
        )
        remember(resp)
        return resp

    @app.post("/classify", response_model=ClassifyResponse)
    def classify(req: ClassifyRequest):
        return run_classify(req.image_ref, req.image_ref, req.library_version,
                            req.top_k, req.include_explanations, req.image_size)

    @app.post("/classify/upload", response_model=ClassifyResponse)
    async def classify_upload(image: UploadFile = File(...),
                              library_version: str = Form(...),
                              top_k: int | None = Form(None)):
        """Multipart variant: the raw image bytes go straight to the image
        encoder (requires a provider that decodes bytes, not id lookups)."""
        payload = await image.read()
        return run_classify(payload, image.filename or "upload", library_version,
                            top_k, True, (224, 224))

    @app.get("/libraries", response_model=list[str])
    def list_libraries():
        return store.versions()

    @app.get("/libraries/{version_id}", response_model=LibraryOut)
    def get_library(version_id: str):
        try:
            v = store.get(version_id)
        except PeebError as exc:
            raise _http_error(exc) from exc
        return LibraryOut(id=v.id, parent=v.parent, is_head=(v.id == store.head_id),
                          parts=list(v.library.vocabulary.parts),
                          classes={n: dict(p) for n, p in v.library.classes.items()})

    @app.post("/libraries/{version_id}/edit", response_model=EditResponse)
    def edit_library(version_id: str, req: EditRequest):
        try:
            base = store.get(version_id)
            new_lib = _apply_ops(base.library, req.ops)
            new_id = store.commit(version_id, new_lib)
        except PeebError as exc:
            raise _http_error(exc) from exc
        return EditResponse(version_id=new_id, parent=version_id,
                            diff=dsc.diff_libraries(base.library, new_lib))

    @app.post("/libraries/{version_id}/clone-class", response_model=EditResponse)
    def clone_class_endpoint(version_id: str, req: CloneRequest):
        try:
            base = store.get(version_id)
            new_lib = dsc.clone_class(base.library, req.src, req.new_name)
            new_id = store.commit(version_id, new_lib)
        except PeebError as exc:
            raise _http_error(exc) from exc
        return EditResponse(version_id=new_id, parent=version_id,
                            diff=dsc.diff_libraries(base.library, new_lib))

    @app.get("/explanations/{request_id}", response_model=ClassifyResponse)
    def get_explanation(request_id: str):
        if request_id not in recent_responses:
            raise HTTPException(status_code=404, detail=f"unknown request id {request_id!r}")
        return recent_responses[request_id]

    @app.post("/jobs/train", response_model=JobOut)
    def launch_training():
        if trainer is None:
            raise HTTPException(status_code=400, detail="no trainer configured")
        job = jobs.submit("train", trainer)
        return JobOut(id=job.id, kind=job.kind, status=job.status,
                      detail=job.detail, result=job.result)

    @app.get("/jobs/{job_id}", response_model=JobOut)
    def get_job(job_id: str):
        try:
            job = jobs.get(job_id)
        except PeebError as exc:
            raise _http_error(exc) from exc
        return JobOut(id=job.id, kind=job.kind, status=job.status,
                      detail=job.detail, result=job.result)

    return app
