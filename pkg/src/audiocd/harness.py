"""Experiment orchestration: decode every sample, judge, and report.

Layout on disk::

    runs/<run_id>/config.json          resolved config snapshot
    runs/<run_id>/run.json             timestamps and sub-run ids
    runs/<run_id>/<method>/responses.jsonl
    runs/<run_id>/<method>/traces.jsonl
    runs/<run_id>/<method>/errors.jsonl      quarantined samples
    runs/<run_id>/<method>/verdicts.jsonl    written by judge_run
    runs/<run_id>/<method>/unjudged.jsonl

A sub-run is addressed as ``<run_id>/<method>`` (lower-case method).
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import analysis
from .audio import load_wav
from .backend import DecodeContext, ScriptedBackend, SyntheticBackend, SyntheticItem, make_synthetic_dataset
from .core import ContrastParams, backend_name
from .judge import (
    ChatClient,
    Judge,
    JudgeCache,
    JudgeRequest,
    JudgeUnavailableError,
    MockJudgeEndpoint,
    Verdict,
)
from .strategies import Method, StrategyConfig, decode, write_trace

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class ReportError(RuntimeError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    question: str
    ground_truth: str
    task: str = "default"
    audio_path: str | None = None
    synthetic: dict | None = None

    def to_json(self) -> dict:
        rec = {"id": self.id, "question": self.question, "ground_truth": self.ground_truth, "task": self.task}
        if self.audio_path is not None:
            rec["audio_path"] = self.audio_path
        if self.synthetic is not None:
            rec["synthetic"] = self.synthetic
        return rec


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    source: str = "file"

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ConfigError(f"duplicate sample id {e.id!r}")
            seen.add(e.id)

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        entries = []
        with path.open(encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                audio = rec.get("audio_path")
                if audio is not None and not Path(audio).is_absolute():
                    audio = str(path.parent / audio)
                entries.append(ManifestEntry(
                    id=str(rec["id"]), question=rec["question"], ground_truth=rec["ground_truth"],
                    task=rec.get("task", "default"), audio_path=audio, synthetic=rec.get("synthetic"),
                ))
        return cls(entries, source=str(path))

    @classmethod
    def from_items(cls, items) -> "DatasetManifest":
        entries = []
        for it in items:
            rec = it.to_json()
            entries.append(ManifestEntry(rec["id"], rec["question"], rec["ground_truth"], rec["task"],
                                         synthetic=rec["synthetic"]))
        return cls(entries, source="synthetic")

    def dump(self, fh) -> None:
        for e in self.entries:
            fh.write(json.dumps(e.to_json()) + "\n")


@dataclass
class RunRecord:
    run_id: str
    config: dict
    sub_runs: list[str]
    completed: int = 0
    quarantined: int = 0
    started: float = field(default_factory=time.time)
    finished: float | None = None

    @property
    def partial(self) -> bool:
        return self.quarantined > 0


# --------------------------------------------------------------------------
# config
# --------------------------------------------------------------------------


def load_config(path) -> dict:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a mapping")
    return resolve_config(raw, base_dir=path.parent)


def resolve_config(raw: dict, base_dir=".") -> dict:
    """Fill defaults and validate; the result is what gets snapshotted."""
    base_dir = Path(base_dir)
    cfg = {}
    cfg["run_id"] = str(raw.get("run_id") or "run")
    if "/" in cfg["run_id"]:
        raise ConfigError("run_id must not contain '/'")
    cfg["seed"] = int(raw.get("seed", 0))
    cfg["workers"] = int(raw.get("workers", 0))

    ds = raw.get("dataset") or {}
    if "synthetic" in ds:
        s = ds["synthetic"] or {}
        cfg["dataset"] = {"synthetic": {
            "items": int(s.get("items", 200)),
            "conflict": float(s.get("conflict", 0.5)),
            "seed": int(s.get("seed", cfg["seed"])),
        }}
    elif "manifest" in ds:
        cfg["dataset"] = {"manifest": str((base_dir / ds["manifest"]).resolve())}
    else:
        raise ConfigError("dataset needs either 'synthetic' or 'manifest'")

    be = raw.get("backend") or {}
    kind = be.get("kind", "synthetic")
    if kind == "synthetic":
        cfg["backend"] = {"kind": "synthetic", "n_layers": int(be.get("n_layers", 28))}
    elif kind == "scripted":
        if "table" not in be:
            raise ConfigError("scripted backend needs 'table'")
        cfg["backend"] = {"kind": "scripted", "table": str((base_dir / be["table"]).resolve())}
    else:
        raise ConfigError(f"unknown backend kind {kind!r}")

    try:
        methods = [Method.parse(m) for m in raw.get("methods", ["GREEDY"])]
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if Method.GREEDY not in methods:
        methods.insert(0, Method.GREEDY)
    cfg["methods"] = [m.value for m in dict.fromkeys(methods)]

    dec = raw.get("decode") or {}
    cfg["decode"] = {"max_new_tokens": int(dec.get("max_new_tokens", 16)), "eos_token": int(dec.get("eos_token", 0))}

    overrides = {str(k).upper(): v or {} for k, v in (raw.get("params") or {}).items()}
    params = {}
    for m in cfg["methods"]:
        base = StrategyConfig.for_method(m)
        o = overrides.get(m, {})
        params[m] = {
            "alpha": float(o.get("alpha", base.contrast.alpha)),
            "beta": float(o.get("beta", base.contrast.beta)),
            "gamma": float(o.get("gamma", base.contrast.gamma_apc)),
            "tau": float(o.get("tau", base.contrast.tau_entropy)),
            "apc": bool(o.get("apc", base.apc_enabled)),
            "snr_db": float(o.get("snr_db", base.noise_snr_db)),
            "negative_prompt": str(o.get("negative_prompt", base.negative_prompt_text)),
        }
        try:
            strategy_config(cfg | {"params": params}, m, 0)
        except ValueError as exc:
            raise ConfigError(f"params for {m}: {exc}") from exc
    cfg["params"] = params

    j = raw.get("judge") or {}
    cfg["judge"] = {
        "mock": bool(j.get("mock", False)),
        "model": j.get("model"),
        "base_url": j.get("base_url"),
        "cache": None if j.get("cache") is None else str((base_dir / j["cache"]).resolve()),
        "concurrency": int(j.get("concurrency", 4)),
        "rubric_version": str(j.get("rubric_version", "v1")),
    }
    return cfg


def strategy_config(cfg: dict, method: str, seed: int) -> StrategyConfig:
    p = cfg["params"][method]
    return StrategyConfig(
        method=Method.parse(method),
        contrast=ContrastParams(alpha=p["alpha"], beta=p["beta"], gamma_apc=p["gamma"], tau_entropy=p["tau"]),
        noise_snr_db=p["snr_db"],
        negative_prompt_text=p["negative_prompt"],
        max_new_tokens=cfg["decode"]["max_new_tokens"],
        eos_token=cfg["decode"]["eos_token"],
        apc_enabled=p["apc"],
        seed=seed,
    )


def sample_seed(seed: int, sample_id: str) -> int:
    return zlib.crc32(f"{seed}:{sample_id}".encode())


def build_dataset(cfg: dict) -> DatasetManifest:
    ds = cfg["dataset"]
    if "synthetic" in ds:
        s = ds["synthetic"]
        return DatasetManifest.from_items(make_synthetic_dataset(s["items"], s["conflict"], s["seed"]))
    return DatasetManifest.load(ds["manifest"])


def build_backend(cfg: dict, manifest: DatasetManifest):
    be = cfg["backend"]
    if be["kind"] == "synthetic":
        missing = [e.id for e in manifest.entries if e.synthetic is None]
        if missing:
            raise ConfigError(f"synthetic backend needs synthetic payloads; missing for {missing[:5]}")
        items = [SyntheticItem.from_json(e.to_json()) for e in manifest.entries]
        return SyntheticBackend(items, n_layers=be["n_layers"])
    return ScriptedBackend.load(be["table"])


# --------------------------------------------------------------------------
# run
# --------------------------------------------------------------------------


def _sub_id(run_id: str, method: str) -> str:
    return f"{run_id}/{method.lower()}"


def _run_dir(runs_dir, sub_id: str) -> Path:
    return Path(runs_dir) / sub_id


def _decode_one(backend, entry: ManifestEntry, cfg: dict, method: str):
    seed = sample_seed(cfg["seed"], entry.id)
    if isinstance(backend, SyntheticBackend):
        item = backend.item(entry.id)
        audio = item.audio()
        prompt = backend.prompt_tokens(entry.id)
    else:
        if entry.audio_path is None:
            raise FileNotFoundError(f"{entry.id}: no audio_path")
        audio = load_wav(entry.audio_path)
        prompt = backend.encode(entry.question)
    ctx = DecodeContext(audio=audio, prompt=prompt, sample_id=entry.id)
    scfg = strategy_config(cfg, method, seed)
    tokens, trace = decode(backend, ctx, scfg)
    text = backend.decode_tokens(tokens, scfg.eos_token)
    return tokens, trace, text


def run(config, runs_dir="runs") -> RunRecord:
    """Decode every sample with every configured method (GREEDY always included)."""
    cfg = load_config(config) if not isinstance(config, dict) else config
    manifest = build_dataset(cfg)
    backend = build_backend(cfg, manifest)
    root = Path(runs_dir) / cfg["run_id"]
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    workers = cfg["workers"] or os.cpu_count() or 1
    record = RunRecord(cfg["run_id"], cfg, [_sub_id(cfg["run_id"], m) for m in cfg["methods"]])

    for method, sub in zip(cfg["methods"], record.sub_runs):
        out = _run_dir(runs_dir, sub)
        out.mkdir(parents=True, exist_ok=True)

        def task(entry, method=method):
            try:
                return entry, _decode_one(backend, entry, cfg, method), None
            except Exception as exc:  # quarantined per sample
                return entry, None, exc

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(task, manifest.entries))

        with (out / "responses.jsonl").open("w", encoding="utf-8") as resp_fh, \
                (out / "traces.jsonl").open("w", encoding="utf-8") as trace_fh, \
                (out / "errors.jsonl").open("w", encoding="utf-8") as err_fh:
            for entry, result, exc in results:
                if exc is not None:
                    log.warning("%s %s quarantined: %s", method, entry.id, exc)
                    err_fh.write(json.dumps({"id": entry.id, "method": method,
                                             "error": f"{type(exc).__name__}: {exc}"}) + "\n")
                    record.quarantined += 1
                    continue
                tokens, trace, text = result
                rec = {
                    "id": entry.id,
                    "method": method,
                    "task": entry.task,
                    "question": entry.question,
                    "ground_truth": entry.ground_truth,
                    "text": text,
                    "tokens": tokens,
                    "interventions": sum(1 for st in trace if st.amateur is not None),
                    "layers": [st.layer for st in trace if st.layer is not None],
                    "trace_path": "traces.jsonl",
                }
                resp_fh.write(json.dumps(rec) + "\n")
                write_trace(trace_fh, entry.id, method, trace)
                record.completed += 1

    record.finished = time.time()
    meta = {
        "run_id": record.run_id,
        "sub_runs": record.sub_runs,
        "completed": record.completed,
        "quarantined": record.quarantined,
        "started": record.started,
        "finished": record.finished,
        "kernels": backend_name(),
    }
    (root / "run.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    return record


# --------------------------------------------------------------------------
# judging
# --------------------------------------------------------------------------


def _read_jsonl(path: Path) -> list[dict]:
    if not path.exists():
        return []
    out = []
    with path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                try:
                    out.append(json.loads(line))
                except ValueError:
                    log.warning("skipping truncated line in %s", path)
    return out


def resolve_sub_runs(run_id: str, runs_dir) -> list[str]:
    if "/" in run_id:
        if not (_run_dir(runs_dir, run_id) / "responses.jsonl").exists():
            raise FileNotFoundError(f"no responses for run {run_id!r} under {runs_dir}")
        return [run_id]
    meta = Path(runs_dir) / run_id / "run.json"
    if not meta.exists():
        raise FileNotFoundError(f"no run {run_id!r} under {runs_dir}")
    return json.loads(meta.read_text())["sub_runs"]


def _run_config(sub_id: str, runs_dir) -> dict:
    return json.loads((Path(runs_dir) / sub_id.split("/")[0] / "config.json").read_text())


def judge_from_config(cfg: dict, runs_dir="runs") -> Judge:
    j = cfg.get("judge") or {}
    if j.get("mock"):
        client = MockJudgeEndpoint(model=j.get("model") or "mock-judge").client()
    else:
        client = ChatClient(base_url=j.get("base_url"), model=j.get("model"))
    cache_path = j.get("cache") or str(Path(runs_dir) / "judge_cache.jsonl")
    return Judge(client, JudgeCache(cache_path), rubric_version=j.get("rubric_version", "v1"),
                 concurrency=j.get("concurrency", 4))


@dataclass
class JudgeSummary:
    judged: int = 0
    unjudged: int = 0
    pending: int = 0
    unavailable: bool = False

    @property
    def complete(self) -> bool:
        return self.unjudged == 0 and self.pending == 0 and not self.unavailable


def judge_run(run_id: str, runs_dir="runs", judge: Judge | None = None) -> JudgeSummary:
    """Judge every response not yet in ``verdicts.jsonl``; safe to rerun after interruption."""
    summary = JudgeSummary()
    for sub in resolve_sub_runs(run_id, runs_dir):
        j = judge or judge_from_config(_run_config(sub, runs_dir), runs_dir)
        _judge_sub_run(sub, runs_dir, j, summary)
    return summary


def _judge_sub_run(sub: str, runs_dir, judge: Judge, summary: JudgeSummary) -> None:
    out = _run_dir(runs_dir, sub)
    responses = _read_jsonl(out / "responses.jsonl")
    verdict_path = out / "verdicts.jsonl"
    done = {}
    for rec in _read_jsonl(verdict_path):
        done[rec["id"]] = rec
    order = [r["id"] for r in responses]
    unjudged = []
    items = []
    for r in responses:
        if r["id"] in done:
            continue
        try:
            items.append((r["id"], JudgeRequest(r["question"], r["ground_truth"], r["text"])))
        except ValueError as exc:
            unjudged.append({"id": r["id"], "reason": str(exc)})

    lock = threading.Lock()

    def on_result(sid, result):
        with lock:
            if isinstance(result, Verdict):
                done[sid] = result.to_json()
                with verdict_path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(result.to_json(), ensure_ascii=False) + "\n")
            else:
                unjudged.append({"id": sid, "reason": f"{type(result).__name__}: {result}"})

    try:
        judge.map(items, on_result)
    except JudgeUnavailableError as exc:
        log.error("judging %s stopped: %s", sub, exc)
        summary.unavailable = True

    # canonical order once nothing is in flight
    lines = [json.dumps(done[i], ensure_ascii=False) + "\n" for i in order if i in done]
    tmp = verdict_path.with_suffix(".tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    tmp.replace(verdict_path)
    unjudged.sort(key=lambda u: order.index(u["id"]))
    (out / "unjudged.jsonl").write_text("".join(json.dumps(u) + "\n" for u in unjudged), encoding="utf-8")

    summary.judged += sum(1 for i in order if i in done)
    summary.unjudged += len(unjudged)
    summary.pending += sum(1 for i in order if i not in done) - len(unjudged)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def load_verdicts(sub: str, runs_dir) -> tuple[list[dict], list[Verdict]]:
    out = _run_dir(runs_dir, sub)
    responses = _read_jsonl(out / "responses.jsonl")
    verdicts = {r["id"]: Verdict.from_json(r) for r in _read_jsonl(out / "verdicts.jsonl")}
    missing = [r["id"] for r in responses if r["id"] not in verdicts]
    if missing:
        raise ReportError(f"{sub}: {len(missing)} responses lack verdicts (e.g. {missing[:5]}); run judge first")
    return responses, [verdicts[r["id"]] for r in responses]


def _method_of(sub: str, runs_dir) -> str:
    responses = _read_jsonl(_run_dir(runs_dir, sub) / "responses.jsonl")
    return responses[0]["method"] if responses else sub.split("/")[-1].upper()


def report(baseline: str, contrast: str, out_dir, runs_dir="runs") -> dict:
    """Accuracy table plus full and errors-only transition matrices."""
    if _method_of(baseline, runs_dir) != Method.GREEDY.value:
        raise ReportError(f"baseline {baseline!r} is not a GREEDY run")
    b_resp, b_verdicts = load_verdicts(baseline, runs_dir)
    c_resp, c_verdicts = load_verdicts(contrast, runs_dir)
    pairs = analysis.align(b_verdicts, c_verdicts)
    full = analysis.build_matrix(pairs)

    # harness-side accuracy, straight from the verdict lists
    acc_b = 100.0 * sum(v.correct for v in b_verdicts) / len(b_verdicts)
    acc_c = 100.0 * sum(v.correct for v in c_verdicts) / len(c_verdicts)
    gap = analysis.accuracy_identity_gap(full, acc_b, acc_c)
    if gap > 1e-9:
        raise ReportError(f"accuracy identity violated by {gap}")

    name = contrast.replace("/", "-")
    if baseline == contrast:
        name = f"{name}-self"
    paths = analysis.emit_matrix(full, out_dir, name)
    errors = None
    try:
        errors = analysis.errors_only_view(full)
        paths += analysis.emit_matrix(errors, out_dir, name)
    except analysis.EmptyInputError:
        log.info("no baseline-wrong samples; skipping errors_only view")

    b_method = b_resp[0]["method"]
    c_method = c_resp[0]["method"]
    c_label = c_method if c_method != b_method else f"{c_method} ({contrast})"
    records = [(b_method, r["task"], v) for r, v in zip(b_resp, b_verdicts)]
    if contrast != baseline:
        records += [(c_label, r["task"], v) for r, v in zip(c_resp, c_verdicts)]
    table = analysis.accuracy_table(records)
    paths.append(analysis.emit_accuracy(table, out_dir, name))
    return {
        "paths": [str(p) for p in paths],
        "full": full,
        "errors_only": errors,
        "accuracy": table,
        "baseline_accuracy": acc_b,
        "contrast_accuracy": acc_c,
    }
