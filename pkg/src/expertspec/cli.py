"""Command-line driver: ``python -m expertspec <subcommand>``.

Exit codes: 0 ok, 2 bad usage / config / inputs, 3 runtime failure. Errors
print one line starting with ``error:`` on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import estimator as est
from . import schedule
from .executor import MODES, BufferInvariantError, DeadlockError, run_offloaded_decode
from .metrics import evaluate_trace_batched, write_csv, write_eval_csvs
from .model import ConfigError, ModelConfig, build_model, load_model, preset, save_model
from .speculation import (
    PREDICTOR_NAMES,
    DefaultVectorTable,
    PredictorError,
    accumulate_default_vectors,
    load_hybrid_map,
    make_predictor,
)
from .tensorio import MoetFormatError
from .trace import TraceError, corpus_tokens, load_trace, random_tokens, record_trace, save_trace

log = logging.getLogger("expertspec")

MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# run manifests


def sha256_path(path) -> str:
    """Hash of a file, or of every file in a directory (sorted, manifest excluded)."""
    p = Path(path)
    h = hashlib.sha256()
    if p.is_dir():
        for f in sorted(p.rglob("*")):
            if f.is_file() and f.name != MANIFEST:
                h.update(f.relative_to(p).as_posix().encode())
                h.update(b"\0")
                h.update(f.read_bytes())
    else:
        h.update(p.read_bytes())
    return h.hexdigest()


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    hashes: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0

    def write(self, out_dir) -> Path:
        for label, path in {**self.inputs, **self.outputs}.items():
            if path is not None and Path(path).exists():
                self.hashes[label] = sha256_path(path)
        dest = Path(out_dir) / MANIFEST
        dest.parent.mkdir(parents=True, exist_ok=True)
        dest.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n")
        return dest


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_model(a) -> RunManifest:
    if a.config:
        raw = json.loads(Path(a.config).read_text())
        cfg = ModelConfig.from_dict({**raw, "seed": a.seed if a.seed is not None else raw.get("seed", 0)})
    else:
        cfg = preset(a.preset, **({"seed": a.seed} if a.seed is not None else {}))
    model = build_model(cfg)
    save_model(model, a.out)
    print(f"model {a.preset or a.config}: L={cfg.L} E={cfg.E} k={cfg.k} H={cfg.H} -> {a.out}")
    return RunManifest("gen-model", cfg.to_dict(), {"seed": cfg.seed}, {"config": a.config}, {"model": a.out})


def cmd_trace(a) -> RunManifest:
    model = load_model(a.model)
    if a.corpus:
        try:
            tokens = corpus_tokens(a.corpus)
        except OSError as exc:
            raise TraceError(f"corpus unreadable: {exc}") from None
        if a.max_tokens is not None:
            tokens = tokens[: a.max_tokens]
        if tokens.size and tokens.max() >= model.config.vocab:
            raise TraceError(f"corpus byte {int(tokens.max())} exceeds vocab {model.config.vocab}")
    else:
        if a.random_tokens < 0:
            raise UsageError("--random-tokens must be >= 0")
        tokens = random_tokens(model.config.vocab, a.random_tokens, a.seed)
    if len(tokens) == 0:
        raise TraceError("empty workload")
    t0 = time.perf_counter()
    trace = record_trace(model, tokens, context=a.context)
    save_trace(trace, a.out, extra={"context": a.context, "seed": a.seed})
    print(f"traced {trace.n_tokens} tokens in {time.perf_counter() - t0:.1f}s -> {a.out}")
    return RunManifest(
        "trace",
        {"context": a.context, "n_tokens": trace.n_tokens, "source": "corpus" if a.corpus else "random"},
        {"seed": a.seed},
        {"model": a.model, "corpus": a.corpus},
        {"trace": a.out},
    )


def _table_path(out) -> Path:
    p = Path(out)
    return p if p.suffix == ".moet" else p / "default_vectors.moet"


def cmd_default_vectors(a) -> RunManifest:
    trace = load_trace(a.trace)
    table = accumulate_default_vectors(trace)
    dest = _table_path(a.out)
    table.save(dest)
    unseen = int((table.count == 0).sum())
    print(f"default vectors {table.shape} from {trace.n_tokens} tokens; {unseen} (layer, expert) pairs never routed -> {dest}")
    return RunManifest("default-vectors", {"shape": list(table.shape)}, {}, {"trace": a.trace}, {"default_vectors": str(dest)})


def _load_table(path) -> DefaultVectorTable | None:
    return DefaultVectorTable.load(_table_path(path)) if path else None


def cmd_speculate(a) -> RunManifest:
    model = load_model(a.model)
    trace = load_trace(a.trace)
    table = _load_table(a.default_vectors)
    params = est.load_estimator(a.estimator) if a.estimator else None
    hmap = load_hybrid_map(a.hybrid_map) if a.hybrid_map else None
    predictor = make_predictor(a.predictor, table, params, hmap)
    res = evaluate_trace_batched(model, trace, {a.predictor: predictor}, table)
    write_eval_csvs(res, a.out, a.predictor)
    print(f"{a.predictor}: mean recall@k {res.mean_recall(a.predictor):.4f} over {trace.n_tokens} tokens")
    for l, _, v in res.hit_rate_rows(a.predictor):
        print(f"  layer {l} -> {l + 1}: {v:.4f}")
    out = Path(a.out)
    return RunManifest(
        "speculate",
        {"predictor": a.predictor, "hybrid_map": {str(k): v for k, v in (hmap or {}).items()}},
        {},
        {"model": a.model, "trace": a.trace, "default_vectors": a.default_vectors, "estimator": a.estimator, "hybrid_map": a.hybrid_map},
        {n: str(out / n) for n in ("drift.csv", "hit_rate.csv", "rank_align.csv")},
    )


def cmd_train_estimator(a) -> RunManifest:
    trace = load_trace(a.trace)
    c = trace.config
    raw = json.loads(Path(a.config).read_text()) if a.config else {}
    cfg = est.EstimatorConfig.from_dict({**raw, "d": c.H, "E": c.E, "L": c.L - 1, **({"seed": a.seed} if a.seed is not None else {})})
    table = _load_table(a.default_vectors)
    model = load_model(a.model) if a.model else None
    if a.inputs == "quasi" and (table is None or model is None):
        raise UsageError("--inputs quasi needs --default-vectors and --model")
    data = est.build_distill_data(trace, a.inputs, table, model)
    result = est.train_estimator(data, cfg, c.k, lr=a.lr, batch=a.batch, steps=a.steps, eval_every=a.eval_every)
    out = Path(a.out)
    est.save_estimator(result.params, out)
    est.write_curve(out / "curve.csv", result.curve)
    tokens, kl, hit = result.curve[-1]
    print(f"trained {cfg.param_count()} params on {tokens} tokens: val KL {kl:.4f}, val recall@k {hit:.4f} (untrained {result.curve[0][2]:.4f})")
    return RunManifest(
        "train-estimator",
        {**asdict(cfg), "lr": a.lr, "batch": a.batch, "steps": a.steps, "inputs": a.inputs},
        {"seed": cfg.seed},
        {"trace": a.trace, "config": a.config, "default_vectors": a.default_vectors, "model": a.model},
        {"estimator": str(out)},
    )


def cmd_simulate(a) -> RunManifest:
    tm = schedule.resolve_timing(a.timing, a.k)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    if a.mode in ("on_demand", "both"):
        reports.append(schedule.simulate_on_demand(tm))
    if a.mode in ("prefetch", "both"):
        reports.append(schedule.simulate_prefetch(tm))
    rows = list(schedule.summary_rows(reports))
    if a.mode == "analytic":
        ond = schedule.analytic_on_demand(tm)
        rows = [("analytic_on_demand", ond, "", "", ""), ("analytic_prefetch", ond - schedule.analytic_improvement(tm), "", "", "")]
    write_csv(out / "summary.csv", ("mode", "tpot_us", "compute_frac", "copy_frac", "idle_frac"), rows)
    (out / "timeline.json").write_text(
        json.dumps({r.mode: schedule.timeline_json(r) for r in reports}, indent=1, sort_keys=True) + "\n"
    )
    for row in rows:
        print("  ".join(str(v) if isinstance(v, str) else f"{v:.6g}" for v in row))
    if a.mode == "both":
        ond, pf = reports
        if pf.tpot > ond.tpot:
            raise AssertionError(f"prefetch tpot {pf.tpot} exceeds on-demand {ond.tpot}")
        d_sim, d_an = ond.tpot - pf.tpot, schedule.analytic_improvement(tm)
        print(f"delta_T sim {d_sim:.6g} us  analytic {d_an:.6g} us  speedup sim {ond.tpot / pf.tpot:.4f} analytic {schedule.analytic_speedup(tm):.4f}")
    return RunManifest(
        "simulate",
        {"timing": tm.to_dict(), "mode": a.mode, "k": a.k},
        {},
        {"timing": a.timing if Path(a.timing).exists() else None},
        {"summary": str(out / "summary.csv"), "timeline": str(out / "timeline.json")},
    )


def _prompt_ids(a, vocab: int) -> list[int]:
    if a.prompt_ids:
        ids = [int(x) for x in a.prompt_ids.split(",") if x.strip()]
    else:
        ids = list(a.prompt.encode("utf-8"))
    if not ids:
        raise UsageError("empty prompt")
    if max(ids) >= vocab or min(ids) < 0:
        raise UsageError(f"prompt token outside vocab of size {vocab}")
    return ids


def cmd_e2e(a) -> RunManifest:
    model = load_model(a.model)
    table = _load_table(a.default_vectors)
    params = est.load_estimator(a.estimator) if a.estimator else None
    hmap = load_hybrid_map(a.hybrid_map) if a.hybrid_map else None
    predictor = None
    if a.predictor != "none":
        predictor = make_predictor(a.predictor, table, params, hmap)
    elif a.mode == "prefetch":
        raise UsageError("--mode prefetch needs a predictor")
    prompt = _prompt_ids(a, model.config.vocab)
    run = run_offloaded_decode(model, prompt, a.new_tokens, predictor, a.copy_latency_us, a.mode)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "timeline.json").write_text(json.dumps(run.timeline(), indent=1) + "\n")
    write_csv(out / "per_token.csv", ("token", "tpot_us"), ((t.token, float(t.duration)) for t in run.per_token))
    tokens_path = out / "tokens.json"
    tokens_path.write_text(json.dumps({"prompt": prompt, "tokens": run.tokens}) + "\n")
    text = bytes(t for t in run.tokens if t < 256).decode("utf-8", errors="replace")
    print("tokens:", " ".join(map(str, run.tokens)))
    print("text:", repr(text))
    copy = run.copy_per_layer_us()
    comp = run.compute_per_layer_us()
    print(f"mode {a.mode}: mean TPOT {run.mean_tpot_us:.1f} us over {len(run.per_token)} tokens")
    print(f"per-layer copy {copy.mean():.1f} us, compute {comp.mean():.1f} us, sum min(copy, compute) {np.minimum(copy, comp).sum():.1f} us")
    return RunManifest(
        "e2e",
        {"predictor": a.predictor, "mode": a.mode, "copy_latency_us": a.copy_latency_us, "new_tokens": a.new_tokens},
        {},
        {"model": a.model, "default_vectors": a.default_vectors, "estimator": a.estimator},
        {"tokens": str(tokens_path), "timeline": str(out / "timeline.json"), "per_token": str(out / "per_token.csv")},
    )


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="expertspec", description="MoE expert speculation and offload experiments")
    p.add_argument("--threads", type=int, default=1, help="accepted for interface compatibility; evaluation is vectorized")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-model", help="build a random toy MoE and save it")
    src = g.add_mutually_exclusive_group(required=True)
    src.add_argument("--preset", choices=sorted(("toy", "toy-large")))
    src.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_model)

    t = sub.add_parser("trace", help="record per-layer activations over a workload")
    t.add_argument("--model", required=True)
    w = t.add_mutually_exclusive_group(required=True)
    w.add_argument("--corpus")
    w.add_argument("--random-tokens", type=int)
    t.add_argument("--max-tokens", type=int)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--context", type=int, default=128, help="tokens per fresh-state window")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_trace)

    d = sub.add_parser("default-vectors", help="average expert outputs over a trace")
    d.add_argument("--trace", required=True)
    d.add_argument("--out", required=True, help="directory or .moet path")
    d.set_defaults(func=cmd_default_vectors)

    s = sub.add_parser("speculate", help="score a next-layer predictor on a trace")
    s.add_argument("--model", required=True)
    s.add_argument("--trace", required=True)
    s.add_argument("--default-vectors")
    s.add_argument("--predictor", required=True, choices=PREDICTOR_NAMES)
    s.add_argument("--estimator")
    s.add_argument("--hybrid-map")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_speculate)

    e = sub.add_parser("train-estimator", help="distill the router estimator")
    e.add_argument("--trace", required=True)
    e.add_argument("--model")
    e.add_argument("--default-vectors")
    e.add_argument("--config", help="JSON with m, n, eps, seed")
    e.add_argument("--inputs", choices=("quasi", "self"), default="quasi")
    e.add_argument("--steps", type=int, default=1000)
    e.add_argument("--lr", type=float, default=3e-3)
    e.add_argument("--batch", type=int, default=256, help="tokens per step")
    e.add_argument("--eval-every", type=int, default=50)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_train_estimator)

    m = sub.add_parser("simulate", help="discrete-event TPOT simulation")
    m.add_argument("--timing", required=True, help="timing JSON path, builtin preset, or model geometry name")
    m.add_argument("--k", type=int, help="experts per token for geometry presets")
    m.add_argument("--mode", choices=("on_demand", "prefetch", "both", "analytic"), default="both")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_simulate)

    x = sub.add_parser("e2e", help="decode with experts streamed through a real copy lane")
    x.add_argument("--model", required=True)
    x.add_argument("--predictor", choices=(*PREDICTOR_NAMES, "none"), default="router-pf")
    x.add_argument("--default-vectors")
    x.add_argument("--estimator")
    x.add_argument("--hybrid-map")
    x.add_argument("--copy-latency-us", type=float, default=5000.0)
    x.add_argument("--mode", choices=MODES, default="prefetch")
    x.add_argument("--prompt", default="The ")
    x.add_argument("--prompt-ids", help="comma-separated token ids (overrides --prompt)")
    x.add_argument("--new-tokens", type=int, default=32)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_e2e)
    return p


USAGE_ERRORS = (
    UsageError,
    ConfigError,
    est.EstimatorConfigError,
    PredictorError,
    schedule.TimingError,
    TraceError,
    MoetFormatError,
    FileNotFoundError,
    json.JSONDecodeError,
)
RUNTIME_ERRORS = (DeadlockError, BufferInvariantError, AssertionError, OSError, ValueError, IndexError, RuntimeError)


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
    t0 = time.perf_counter()
    try:
        manifest = a.func(a)
        manifest.wall_clock_s = round(time.perf_counter() - t0, 3)
        manifest.config["threads"] = a.threads
        out = Path(a.out)
        manifest.write(out.parent if out.suffix == ".moet" else out)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
