"""HTTP trial service: sessions, fixation ingestion, time-budgeted generation,
probe delivery, response recording, append-only persistence, and the
diversity-based stimulus subset selector.

State machine per trial: viewing -> generating -> probe-ready -> responding ->
done, with "excluded" reachable from generating (budget exceeded) or aborted
jobs.  Each session is single-writer behind its own lock; generation jobs run
on one bounded executor shared across sessions.
"""
from __future__ import annotations

import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from fovgen import __version__, fileio
from fovgen.data import SceneDataset
from fovgen.diffusion import GenerativeModel, SamplerConfig, generate_from_trial
from fovgen.errors import CapacityError, ConfigError, ProtocolError
from fovgen.foveation import Fixation, FixationSequence, sample_random_fixations

SCHEMA_VERSION = 1
SERVICE_CONDITIONS = ("original", "own-fixation", "random", "foveal-only", "peripheral-only")
FIXATION_COUNTS = (1, 2, 3, 5, 10)


def diverse_subset(embeddings: np.ndarray, k: int, seed=None) -> list[int]:
    """Greedy k-center (farthest-point) selection on embedding distance.

    The start is the point farthest from the centroid (or seeded-random when
    a seed is given); thereafter each pick maximizes the distance to the
    selected set.  Deterministic for a fixed start.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    n = emb.shape[0]
    if k > n:
        raise CapacityError(f"cannot select {k} from {n} stimuli")
    if k == n:
        return list(range(n))
    if seed is None:
        start = int(np.argmax(np.linalg.norm(emb - emb.mean(axis=0), axis=1)))
    else:
        start = int(np.random.default_rng(seed).integers(0, n))
    chosen = [start]
    d = np.linalg.norm(emb - emb[start], axis=1)
    while len(chosen) < k:
        nxt = int(np.argmax(d))
        chosen.append(nxt)
        d = np.minimum(d, np.linalg.norm(emb - emb[nxt], axis=1))
    return chosen


@dataclass
class SessionConfig:
    n_stimuli: int = 10
    conditions: tuple = SERVICE_CONDITIONS
    probe_ms: int = 200
    generation_budget_ms: int = 5000
    response_window_ms: int = 10000
    blur_scale: float = 0.25
    fixation_proxy: str = "click-proxy"
    sampler_steps: int = 10
    seed: int = 0
    use_diverse_subset: bool = True

    def __post_init__(self):
        self.conditions = tuple(self.conditions)
        for c in self.conditions:
            if c not in SERVICE_CONDITIONS:
                raise ConfigError(f"unknown trial condition {c!r}")


@dataclass
class TrialState:
    index: int
    stimulus_index: int
    stimulus_id: str
    condition: str
    target_count: int
    seed: int
    phase: str = "viewing"  # viewing|generating|probe-ready|responding|done|excluded
    gen_started_at: float = -1.0
    fixations: list = field(default_factory=list)
    image_ref: str = ""
    generation_ms: float = -1.0
    budget_exceeded: bool = False
    probe_shown_at: float = -1.0
    response: str = ""
    response_time_ms: float = -1.0


class ExperimentService:
    def __init__(
        self,
        model: GenerativeModel | None,
        dataset: SceneDataset,
        out_dir,
        default_config: SessionConfig | None = None,
        checkpoint_id: str = "uninitialized",
        gen_workers: int = 1,
    ):
        self.model = model
        self.dataset = dataset
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.default_config = default_config or SessionConfig()
        self.checkpoint_id = checkpoint_id
        self.executor = ThreadPoolExecutor(max_workers=gen_workers)
        self.sessions: dict[str, dict] = {}
        self._lock = threading.Lock()
        needs_model = [c for c in self.default_config.conditions if c != "original"]
        if needs_model and model is None:
            raise ConfigError("generated-image conditions require a model checkpoint")

    # -- session lifecycle ----------------------------------------------------

    def _schedule(self, cfg: SessionConfig) -> list[tuple[int, str, int]]:
        """Counterbalanced (stimulus, condition, target_count) covering every
        stimulus exactly once; deterministic under the session seed."""
        rng = np.random.default_rng(cfg.seed)
        n = cfg.n_stimuli
        if n > self.dataset.n:
            raise CapacityError(f"session wants {n} stimuli, dataset has {self.dataset.n}")
        if cfg.use_diverse_subset and n < self.dataset.n:
            pool = min(self.dataset.n, max(4 * n, n))
            embeds = self.model.encoder.pooled_batch(self.dataset.batch(range(pool))) if self.model \
                else self.dataset.batch(range(pool)).reshape(pool, -1)
            stim_indices = diverse_subset(embeds, n)
        else:
            stim_indices = list(range(n))
        conds = [cfg.conditions[i % len(cfg.conditions)] for i in range(n)]
        counts = [FIXATION_COUNTS[i % len(FIXATION_COUNTS)] for i in range(n)]
        rng.shuffle(conds)
        rng.shuffle(counts)
        return list(zip(stim_indices, conds, counts))

    def create_session(self, cfg: SessionConfig | None = None) -> str:
        cfg = cfg or self.default_config
        sid = uuid.uuid4().hex[:12]
        schedule = self._schedule(cfg)
        trials = []
        for i, (stim, cond, count) in enumerate(schedule):
            trials.append(
                TrialState(
                    index=i,
                    stimulus_index=stim,
                    stimulus_id=self.dataset.stimulus_id(stim),
                    condition=cond,
                    target_count=count,
                    seed=int(np.random.default_rng([cfg.seed, i]).integers(0, 2**31)),
                )
            )
        sdir = self.out_dir / f"session-{sid}"
        sdir.mkdir(parents=True, exist_ok=True)
        with self._lock:
            self.sessions[sid] = {
                "config": cfg,
                "trials": trials,
                "lock": threading.Lock(),
                "dir": sdir,
                "log": sdir / "trials.jsonl",
                "jobs": {},
            }
        return sid

    def _session(self, sid: str) -> dict:
        s = self.sessions.get(sid)
        if s is None:
            raise KeyError(sid)
        return s

    def _trial(self, s, index: int) -> TrialState:
        trials = s["trials"]
        if not (0 <= index < len(trials)):
            raise KeyError(index)
        return trials[index]

    def _log(self, s, record: dict):
        record = {"schema_version": SCHEMA_VERSION, **record}
        fileio.append_jsonl(s["log"], record)

    # -- trial flow -------------------------------------------------------------

    def ingest_fixation(self, sid: str, trial_idx: int, x: float, y: float, t_ms: float) -> dict:
        s = self._session(sid)
        with s["lock"]:
            t = self._trial(s, trial_idx)
            if t.phase != "viewing":
                raise ProtocolError(f"fixation rejected: trial {trial_idx} is in phase {t.phase}")
            t.fixations.append({"x": float(x), "y": float(y), "onset_ms": float(t_ms), "duration_ms": 0.0})
            done = len(t.fixations) >= t.target_count
            if done:
                t.phase = "generating"
                self._start_generation(sid, s, t)
            return {
                "status": "complete" if done else "continue",
                "count": len(t.fixations),
                "target": t.target_count,
            }

    def _start_generation(self, sid: str, s, t: TrialState):
        cfg: SessionConfig = s["config"]
        if t.condition == "original":
            t.image_ref = "original"
            t.generation_ms = 0.0
            t.phase = "probe-ready"
            self._log(s, self._record(sid, s, t, event="generated"))
            return
        start = time.monotonic()
        t.gen_started_at = start

        def job():
            side = self.model.cfg.denoiser.side
            scale = side / self.dataset.side
            if t.condition == "random":
                gen_condition = "full"
                fixes = sample_random_fixations(
                    t.target_count, side, t.seed, patch_size=self.model.cfg.encoder.patch_size
                )
            else:
                pts = [
                    Fixation(
                        min(f["x"] * scale, side - 1e-6),
                        min(f["y"] * scale, side - 1e-6),
                        f["onset_ms"],
                        f["duration_ms"],
                    )
                    for f in t.fixations
                ]
                fixes = FixationSequence(pts, source=cfg.fixation_proxy)
                gen_condition = {"own-fixation": "full", "foveal-only": "foveal-only",
                                 "peripheral-only": "peripheral-only"}[t.condition]
            sc = SamplerConfig(
                steps=cfg.sampler_steps,
                lambda_foveal=1.2,
                lambda_peripheral=0.7,
            )
            with threadpool_limits(limits=1):
                img = generate_from_trial(
                    self.model,
                    self.dataset.buffer(t.stimulus_index),
                    fixes,
                    cfg.blur_scale,
                    gen_condition,
                    sc,
                    seed=t.seed,
                )
            out_path = s["dir"] / f"trial-{t.index:03d}.png"
            fileio.save_png(out_path, img.pixels)
            return str(out_path)

        def run_and_finish():
            try:
                path = job()
                elapsed = (time.monotonic() - start) * 1000.0
                with s["lock"]:
                    if t.phase != "generating":  # probe poll already excluded it
                        return
                    t.generation_ms = elapsed
                    if elapsed > cfg.generation_budget_ms:
                        t.budget_exceeded = True
                        t.phase = "excluded"
                        self._log(s, self._record(sid, s, t, event="excluded"))
                    else:
                        t.image_ref = path
                        t.phase = "probe-ready"
                        self._log(s, self._record(sid, s, t, event="generated"))
            except Exception as e:  # model failure aborts the trial, logged
                with s["lock"]:
                    if t.phase != "generating":
                        return
                    t.phase = "excluded"
                    t.budget_exceeded = False
                    self._log(s, self._record(sid, s, t, event="aborted", error=str(e)))

        s["jobs"][t.index] = self.executor.submit(run_and_finish)

    def probe(self, sid: str, trial_idx: int):
        """Returns (pixels, probe_ms) when ready; raises ProtocolError with
        pending/excluded codes otherwise."""
        s = self._session(sid)
        with s["lock"]:
            t = self._trial(s, trial_idx)
            cfg: SessionConfig = s["config"]
            if t.phase == "viewing":
                raise ProtocolError(f"trial {trial_idx} still in viewing phase")
            if t.phase == "generating":
                elapsed = (time.monotonic() - t.gen_started_at) * 1000.0
                if elapsed > cfg.generation_budget_ms:
                    t.generation_ms = elapsed
                    t.budget_exceeded = True
                    t.phase = "excluded"
                    self._log(s, self._record(sid, s, t, event="excluded"))
                else:
                    e = ProtocolError("generation in progress")
                    e.code = "pending"
                    raise e
            if t.phase == "excluded":
                e = ProtocolError("trial excluded (budget exceeded or aborted)")
                e.code = "excluded"
                raise e
            if t.phase == "probe-ready":
                t.phase = "responding"
                t.probe_shown_at = time.monotonic()
            if t.image_ref == "original":
                pixels = self.dataset.image(t.stimulus_index)
            else:
                pixels = fileio.load_png(t.image_ref)
            return pixels, cfg.probe_ms

    def record_response(self, sid: str, trial_idx: int, response: str, rt_ms: float) -> dict:
        s = self._session(sid)
        with s["lock"]:
            t = self._trial(s, trial_idx)
            cfg: SessionConfig = s["config"]
            if t.phase == "done":
                raise ProtocolError("response already recorded")
            if t.phase != "responding":
                raise ProtocolError(f"response rejected in phase {t.phase}")
            if response not in ("same", "different", "none"):
                raise ProtocolError(f"invalid response {response!r}")
            if rt_ms > cfg.response_window_ms or response == "none":
                t.response = "none"
            else:
                t.response = response
            t.response_time_ms = float(rt_ms)
            t.phase = "done"
            record = self._record(sid, s, t, event="response")
            self._log(s, record)
            return record

    def _record(self, sid, s, t: TrialState, event: str, **extra) -> dict:
        cfg: SessionConfig = s["config"]
        rec = {
            "event": event,
            "session_id": sid,
            "trial_index": t.index,
            "stimulus_id": t.stimulus_id,
            "condition": t.condition,
            "target_count": t.target_count,
            "fixations": list(t.fixations),
            "image_ref": t.image_ref,
            "blur_scale": cfg.blur_scale,
            "sampler_steps": cfg.sampler_steps,
            "probe_ms": cfg.probe_ms,
            "generation_ms": t.generation_ms,
            "budget_exceeded": t.budget_exceeded,
            "response": t.response,
            "response_time_ms": t.response_time_ms,
            "checkpoint_id": self.checkpoint_id,
            "seed": t.seed,
        }
        rec.update(extra)
        return rec

    def export(self, sid: str) -> str:
        s = self._session(sid)
        log = s["log"]
        return log.read_text(encoding="utf-8") if log.exists() else ""

    def session_state(self, sid: str) -> dict:
        s = self._session(sid)
        with s["lock"]:
            cfg: SessionConfig = s["config"]
            trials = s["trials"]
            current = next((t.index for t in trials if t.phase not in ("done", "excluded")), len(trials))
            return {
                "session_id": sid,
                "n_trials": len(trials),
                "current_trial": current,
                "probe_ms": cfg.probe_ms,
                "response_window_ms": cfg.response_window_ms,
                "generation_budget_ms": cfg.generation_budget_ms,
                "blur_scale": cfg.blur_scale,
                "trials": [
                    {
                        "index": t.index,
                        "phase": t.phase,
                        "target_count": t.target_count,
                        "stimulus_id": t.stimulus_id,
                        "fixation_count": len(t.fixations),
                    }
                    for t in trials
                ],
            }

    def stimulus_pixels(self, sid: str, trial_idx: int):
        s = self._session(sid)
        with s["lock"]:
            t = self._trial(s, trial_idx)
            return self.dataset.image(t.stimulus_index)


def regenerate_record(model: GenerativeModel, record: dict, dataset: SceneDataset):
    """Re-run the generation a persisted trial record describes; used to
    verify byte-level reproducibility."""
    side = model.cfg.denoiser.side
    scale = side / dataset.side
    cond = record["condition"]
    if cond == "original":
        return dataset.image(dataset.index_of(record["stimulus_id"]))
    if cond == "random":
        fixes = sample_random_fixations(
            record["target_count"], side, record["seed"], patch_size=model.cfg.encoder.patch_size
        )
        gen_condition = "full"
    else:
        pts = [
            Fixation(
                min(f["x"] * scale, side - 1e-6),
                min(f["y"] * scale, side - 1e-6),
                f["onset_ms"],
                f["duration_ms"],
            )
            for f in record["fixations"]
        ]
        fixes = FixationSequence(pts, source="click-proxy")
        gen_condition = {"own-fixation": "full", "foveal-only": "foveal-only",
                         "peripheral-only": "peripheral-only"}[cond]
    sc = SamplerConfig(steps=record["sampler_steps"], lambda_foveal=1.2, lambda_peripheral=0.7)
    with threadpool_limits(limits=1):
        img = generate_from_trial(
            model,
            dataset.buffer(dataset.index_of(record["stimulus_id"])),
            fixes,
            record["blur_scale"],
            gen_condition,
            sc,
            seed=record["seed"],
        )
    return img.pixels


# ---------------------------------------------------------------------------
# FastAPI wiring


def create_app(service: ExperimentService, frontend_dir=None):
    from fastapi import FastAPI, Request
    from fastapi.responses import JSONResponse, PlainTextResponse, Response

    app = FastAPI(title="fovgen experiment service", version=__version__)

    def problem(status: int, code: str, detail: str):
        return JSONResponse(
            status_code=status,
            content={
                "type": "about:blank",
                "title": code,
                "status": status,
                "code": code,
                "detail": detail,
            },
            media_type="application/problem+json",
        )

    @app.exception_handler(ProtocolError)
    async def _protocol(request: Request, exc: ProtocolError):
        code = getattr(exc, "code", "protocol")
        status = 202 if code == "pending" else 409 if code in ("protocol",) else 410
        return problem(status, code, str(exc))

    @app.exception_handler(KeyError)
    async def _missing(request: Request, exc: KeyError):
        return problem(404, "not-found", f"unknown resource {exc}")

    @app.exception_handler(ConfigError)
    async def _config(request: Request, exc: ConfigError):
        return problem(400, "config", str(exc))

    @app.get("/health")
    def health():
        return {"status": "ok", "version": __version__, "checkpoint": service.checkpoint_id}

    @app.get("/config")
    def config():
        cfg = service.default_config
        # the sharp window defaults to one patch around the cursor
        patch = service.model.cfg.encoder.patch_size if service.model else max(service.dataset.side // 16, 1)
        return {
            "probe_ms": cfg.probe_ms,
            "generation_budget_ms": cfg.generation_budget_ms,
            "response_window_ms": cfg.response_window_ms,
            "blur_scale": cfg.blur_scale,
            "fixation_proxy": cfg.fixation_proxy,
            "stimulus_side": service.dataset.side,
            "fovea_radius_px": max(patch, 1),
            "keys": {"same": "f", "different": "j"},
        }

    @app.post("/sessions")
    def create_session(body: dict | None = None):
        body = body or {}
        base = service.default_config
        cfg = SessionConfig(
            n_stimuli=body.get("n_stimuli", base.n_stimuli),
            conditions=tuple(body.get("conditions", base.conditions)),
            probe_ms=body.get("probe_ms", base.probe_ms),
            generation_budget_ms=body.get("generation_budget_ms", base.generation_budget_ms),
            response_window_ms=body.get("response_window_ms", base.response_window_ms),
            blur_scale=body.get("blur_scale", base.blur_scale),
            sampler_steps=body.get("sampler_steps", base.sampler_steps),
            seed=body.get("seed", base.seed),
            use_diverse_subset=body.get("use_diverse_subset", base.use_diverse_subset),
        )  # response_window_ms included so the UI timeout tests can shorten it
        sid = service.create_session(cfg)
        return service.session_state(sid)

    @app.get("/sessions/{sid}")
    def session_state(sid: str):
        return service.session_state(sid)

    @app.get("/sessions/{sid}/trials/{t}/stimulus")
    def stimulus(sid: str, t: int):
        pixels = service.stimulus_pixels(sid, t)
        return Response(content=fileio.png_bytes(pixels), media_type="image/png")

    @app.post("/sessions/{sid}/trials/{t}/fixations")
    def fixations(sid: str, t: int, body: dict):
        return service.ingest_fixation(sid, t, body["x"], body["y"], body.get("t_ms", 0.0))

    @app.get("/sessions/{sid}/trials/{t}/probe")
    def probe(sid: str, t: int):
        pixels, probe_ms = service.probe(sid, t)
        return Response(
            content=fileio.png_bytes(pixels),
            media_type="image/png",
            headers={"X-Probe-Ms": str(probe_ms)},
        )

    @app.post("/sessions/{sid}/trials/{t}/response")
    def response(sid: str, t: int, body: dict):
        return service.record_response(sid, t, body.get("response", "none"), float(body.get("rt_ms", -1.0)))

    @app.get("/sessions/{sid}/export")
    def export(sid: str):
        return PlainTextResponse(service.export(sid), media_type="application/x-ndjson")

    if frontend_dir is not None and Path(frontend_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="ui")

    return app
