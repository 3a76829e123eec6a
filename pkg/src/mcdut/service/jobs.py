"""Background training jobs.

Jobs run one at a time on a single worker thread: training owns the global
torch RNG and the parameters exclusively for its whole duration.
"""

from __future__ import annotations

import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from ..config import load_preset, resolve
from ..data import scan_dataset
from ..engine import fit
from .schemas import JobStatus, TrainJob, TrainRequest


class JobManager:
    def __init__(self, workdir: str | Path):
        self.workdir = Path(workdir)
        self._jobs: dict[str, TrainJob] = {}
        self._lock = threading.Lock()
        self._pool = ThreadPoolExecutor(max_workers=1, thread_name_prefix="mcdut-train")

    def submit(self, req: TrainRequest) -> TrainJob:
        base = load_preset(req.preset) if req.preset else {}
        job_id = uuid.uuid4().hex[:12]
        out_dir = req.out_dir or str(self.workdir / job_id)
        # validate eagerly so bad configs fail the request, not the job
        run = resolve(base, {**req.config, "data_root": req.data_root, "out_dir": out_dir})
        manifest = scan_dataset(run.data_root, "train")
        job = TrainJob(job_id=job_id, status=JobStatus.queued, out_dir=out_dir)
        with self._lock:
            self._jobs[job_id] = job
        self._pool.submit(self._run, job_id, run, manifest, req.resume)
        return job

    def _update(self, job_id: str, **changes) -> None:
        with self._lock:
            self._jobs[job_id] = self._jobs[job_id].model_copy(update=changes)

    def _run(self, job_id, run, manifest, resume) -> None:
        self._update(job_id, status=JobStatus.running)
        out = Path(run.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        run.write(out / "config.resolved.json")

        def on_step(record):
            metrics = {k: float(v) for k, v in record.items() if k not in ("step", "epoch")}
            self._update(job_id, step=record["step"], last_metrics=metrics)

        try:
            fit(run.train, manifest, out, run.checkpoint_interval, resume=resume, on_step=on_step)
        except Exception as exc:  # reported through the job record
            self._update(job_id, status=JobStatus.failed, error=f"{type(exc).__name__}: {exc}")
        else:
            self._update(job_id, status=JobStatus.finished)

    def get(self, job_id: str) -> TrainJob | None:
        with self._lock:
            return self._jobs.get(job_id)

    def list(self) -> list[TrainJob]:
        with self._lock:
            return list(self._jobs.values())

    def shutdown(self, wait: bool = True) -> None:
        self._pool.shutdown(wait=wait)
