"""FastAPI application factory."""

from __future__ import annotations

import base64
import io
from contextlib import asynccontextmanager
from functools import lru_cache
from pathlib import Path

from fastapi import FastAPI, HTTPException
from PIL import Image, UnidentifiedImageError

from .. import __version__
from ..config import preset_names
from ..data import to_tensor, to_uint8
from ..engine import load_checkpoint, resolve_checkpoint, translate
from ..errors import AssetError, CheckpointError, DatasetError, InvalidConfigError, InvalidInputError
from ..evaluation import evaluate_run, get_extractor
from .jobs import JobManager
from .schemas import (EvaluateRequest, HealthResponse, MetricResponse, TrainJob, TrainRequest,
                      TranslateRequest, TranslateResponse)


def create_app(workdir: str | Path = "runs") -> FastAPI:
    jobs = JobManager(workdir)

    @asynccontextmanager
    async def lifespan(app: FastAPI):
        yield
        jobs.shutdown(wait=False)

    app = FastAPI(title="mcdut", version=__version__, lifespan=lifespan)
    app.state.jobs = jobs

    @lru_cache(maxsize=4)
    def generator_for(checkpoint: str):
        state = load_checkpoint(checkpoint)
        return state.nets.G, state.cfg.crop_size

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(version=__version__, presets=preset_names())

    @app.post("/train", response_model=TrainJob, status_code=202)
    def train(req: TrainRequest):
        try:
            return jobs.submit(req)
        except InvalidConfigError as exc:
            raise HTTPException(422, str(exc))
        except DatasetError as exc:
            raise HTTPException(404, str(exc))

    @app.get("/jobs", response_model=list[TrainJob])
    def list_jobs():
        return jobs.list()

    @app.get("/jobs/{job_id}", response_model=TrainJob)
    def get_job(job_id: str):
        job = jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"no job {job_id}")
        return job

    @app.post("/translate", response_model=TranslateResponse)
    def translate_image(req: TranslateRequest):
        try:
            G, size = generator_for(str(resolve_checkpoint(req.checkpoint)))
        except (AssetError, CheckpointError) as exc:
            raise HTTPException(404, str(exc))
        try:
            im = Image.open(io.BytesIO(base64.b64decode(req.image_png_base64, validate=True))).convert("RGB")
        except (ValueError, UnidentifiedImageError) as exc:
            raise HTTPException(422, f"cannot decode image: {exc}")
        size = req.size or size
        try:
            fake = translate(G, to_tensor(im.resize((size, size), Image.BILINEAR)).unsqueeze(0))[0]
        except InvalidInputError as exc:
            raise HTTPException(422, str(exc))
        buf = io.BytesIO()
        Image.fromarray(to_uint8(fake)).save(buf, format="PNG")
        return TranslateResponse(image_png_base64=base64.b64encode(buf.getvalue()).decode(), width=size, height=size)

    @app.post("/evaluate", response_model=MetricResponse)
    def evaluate(req: EvaluateRequest):
        from ..data import scan_dataset

        try:
            manifest = scan_dataset(req.data_root, req.split)
            report = evaluate_run(req.checkpoint, manifest, get_extractor(req.extractor))
        except (AssetError, CheckpointError, DatasetError) as exc:
            raise HTTPException(404, str(exc))
        except InvalidConfigError as exc:
            raise HTTPException(422, str(exc))
        return MetricResponse(**report.to_dict())

    return app
