"""``qprobe`` command line: forge, trajectories, train, rewards, eval, score."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
import urllib.error
import urllib.request
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import evaluation, forge, probe, rewards, sim
from .errors import (ArgumentError, MissingEntryError, MissingIdError, NetworkError, ParseError, QProbeError,
                     SchemaError)
from .model import Region, atomic_write_text, load_raster, read_manifest

log = logging.getLogger("qprobe")

ORACLE_JITTER = 0.15
PROTOCOL_VERSION = 1
IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm"}


# -- scorer adapter -------------------------------------------------------------

@dataclass(frozen=True)
class ScorerBinding:
    mode: str = "oracle"
    replay_path: str | None = None
    endpoint: str | None = None
    timeout: int = 5000          # milliseconds per attempt
    retries: int = 2
    jitter: float = ORACLE_JITTER
    token: str | None = None
    max_in_flight: int = 4

    def __post_init__(self):
        if self.mode not in ("oracle", "replay", "remote"):
            raise ArgumentError(f"unknown scorer mode {self.mode!r}")
        if self.mode == "replay" and not self.replay_path:
            raise ArgumentError("replay mode requires replay_path")
        if self.mode == "remote" and not self.endpoint:
            raise ArgumentError("remote mode requires endpoint")
        if self.timeout <= 0 or self.retries < 0 or self.jitter < 0 or self.max_in_flight < 1:
            raise ArgumentError("timeout must be > 0, retries >= 0, jitter >= 0, max_in_flight >= 1")


def _check_scores(item_id, scores, k):
    if not isinstance(scores, list) or len(scores) != k:
        got = len(scores) if isinstance(scores, list) else type(scores).__name__
        raise SchemaError(f"item {item_id}: expected {k} scores, got {got}")
    out = []
    for s in scores:
        if isinstance(s, bool) or not isinstance(s, (int, float)) or not math.isfinite(s):
            raise SchemaError(f"item {item_id}: score {s!r} is not a finite number")
        out.append(float(s))
    return out


def _oracle(items, k, jitter, seed):
    groups = {}
    for it in items:
        rng = np.random.default_rng(forge.item_seed(seed, it.id))
        groups[it.id] = np.clip(it.mos + rng.normal(0.0, jitter, size=k), 1.0, 5.0).tolist()
    return groups


def _replay(items, k, path):
    table = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", line=lineno) from None
        if not isinstance(rec, dict) or "id" not in rec or "scores" not in rec:
            raise SchemaError(f"replay line {lineno}: expected an object with id and scores")
        table[rec["id"]] = rec["scores"]
    missing = [it.id for it in items if it.id not in table]
    if missing:
        raise MissingEntryError(f"replay file has no entry for: {', '.join(missing)}")
    return {it.id: _check_scores(it.id, table[it.id], k) for it in items}


def _post_once(binding: ScorerBinding, payload: bytes, timeout_s: float) -> dict:
    headers = {"Content-Type": "application/json"}
    if binding.token:
        headers["Authorization"] = f"Bearer {binding.token}"
    req = urllib.request.Request(binding.endpoint, data=payload, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout_s) as resp:
        body = resp.read()
    try:
        return json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise SchemaError("response is not UTF-8 JSON") from None


def remote_score(binding: ScorerBinding, item, k: int) -> list[float]:
    """POST one item, retrying with exponential backoff; never exceeds timeout * (retries + 1)."""
    payload = json.dumps({"v": PROTOCOL_VERSION, "id": item.id, "image_path": item.image_path, "k": k}).encode()
    budget = binding.timeout / 1000.0 * (binding.retries + 1)
    deadline = time.monotonic() + budget
    delay = min(0.05, binding.timeout / 1000.0 / 4)
    last = None
    for attempt in range(binding.retries + 1):
        remaining = deadline - time.monotonic()
        if remaining <= 0:
            break
        try:
            resp = _post_once(binding, payload, min(binding.timeout / 1000.0, remaining))
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            last = exc
            wait = min(delay * 2 ** attempt, deadline - time.monotonic())
            if attempt < binding.retries and wait > 0:
                time.sleep(wait)
            continue
        if not isinstance(resp, dict) or resp.get("id") != item.id:
            raise SchemaError(f"item {item.id}: response id mismatch or malformed body")
        return _check_scores(item.id, resp.get("scores"), k)
    raise NetworkError(f"item {item.id}: scorer unreachable after {binding.retries + 1} attempt(s): {last}")


def score_items(binding: ScorerBinding, manifest, k: int = 6, seed: int = 0) -> dict[str, list[float]]:
    """K scores per manifest item from the bound scorer."""
    if k < 1:
        raise ArgumentError(f"k must be >= 1, got {k}")
    items = list(manifest)
    if binding.mode == "oracle":
        return _oracle(items, k, binding.jitter, seed)
    if binding.mode == "replay":
        return _replay(items, k, binding.replay_path)
    with ThreadPoolExecutor(max_workers=binding.max_in_flight) as pool:
        results = list(pool.map(lambda it: remote_score(binding, it, k), items))
    return {it.id: r for it, r in zip(items, results)}


# -- config -----------------------------------------------------------------------

def load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, "rb") as f:
        try:
            return tomllib.load(f)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"config: {exc}") from None


def _section(cfg: dict, name: str) -> dict:
    sec = cfg.get(name, {})
    if not isinstance(sec, dict):
        raise ArgumentError(f"config section [{name}] must be a table")
    return sec


def _setting(args, cfg, name, default):
    """Flag value if given, else top-level config key, else default."""
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


# -- commands ---------------------------------------------------------------------

def _out_dir(args, cfg) -> Path:
    out = Path(_setting(args, cfg, "out", "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_forge(args, cfg) -> int:
    src = Path(args.source_dir)
    if not src.is_dir():
        raise FileNotFoundError(f"source directory not found: {src}")
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ArgumentError(f"no source images in {src}")
    fcfg = forge.ForgeConfig.from_dict(_section(cfg, "forge"))
    seed = _setting(args, cfg, "seed", None)
    if seed is not None:
        fcfg = replace(fcfg, seed=int(seed))
    sources = {p.stem: load_raster(p) for p in paths}
    out = _out_dir(args, cfg)
    result = forge.build_benchmark(sources, fcfg, out, jobs=int(_setting(args, cfg, "jobs", 1)))
    for item_id, reason in result.failures.items():
        log.error("forge failed for %s: %s", item_id, reason)
    hist = Counter(int(it.mos) if it.mos < 5 else 5 for it in result.items)
    print(f"{len(result.items)} items ({sum(it.is_pristine for it in result.items)} pristine) -> {result.manifest_path}")
    print("MOS histogram: " + "  ".join(f"[{b},{b + 1}): {hist.get(b, 0)}" if b < 5 else f"5: {hist.get(5, 0)}"
                                         for b in range(1, 6)))
    return 1 if result.failures else 0


def cmd_trajectories(args, cfg) -> int:
    manifest = read_manifest(args.manifest)
    for it in manifest:
        it.validate()
    sec = _section(cfg, "trajectories")
    strategy = args.strategy or sec.get("strategy", probe.CropStrategy.ALL_PLUS_CONTEXT.value)
    seed = int(_setting(args, cfg, "seed", 0))
    crop = int(args.crop or sec.get("crop", probe.DEFAULT_CROP))
    corpus = probe.build_sft_corpus(manifest, strategy=strategy, seed=seed, crop=crop)
    bad = probe.validate_corpus(corpus)
    if bad:
        log.error("invalid trajectories for: %s", ", ".join(bad))
        return 1
    out = Path(args.out_path) if args.out_path else _out_dir(args, cfg) / "corpus.jsonl"
    probe.write_corpus(corpus, out)
    kinds = Counter(t.kind.value for t in corpus)
    print(f"{len(corpus)} trajectories ({strategy}) -> {out}")
    print("  ".join(f"{k}: {v}" for k, v in sorted(kinds.items())))
    return 0


def _parse_stages(text) -> tuple[int, ...]:
    try:
        stages = sorted({int(s) for s in str(text).replace(",", " ").split()})
    except ValueError:
        raise ArgumentError(f"stages must be integers from 1-3, got {text!r}") from None
    if not stages or any(s not in (1, 2, 3) for s in stages):
        raise ArgumentError(f"stages must be a non-empty subset of 1,2,3, got {text!r}")
    return tuple(stages)


def cmd_train(args, cfg) -> int:
    stages = _parse_stages(args.stages)
    scfg = sim.SimConfig.from_dict(_section(cfg, "sim"))
    if args.strategy:
        scfg = replace(scfg, strategy=args.strategy)
    seed = int(_setting(args, cfg, "seed", 0))
    policy = sim.ProbePolicy.load(args.policy) if args.policy else None
    if 3 in stages and 2 not in stages and policy is None:
        raise ArgumentError("stage 3 requires a policy (run stage 2 first or pass --policy)")
    if 2 in stages and scfg.sft_high <= 0:
        raise ArgumentError("stage 2 requires a corpus (sim.sft_high must be > 0)")
    out = _out_dir(args, cfg)
    result = sim.run_curriculum(stages, scfg, seed, policy=policy)
    for name, curve in result.curves.items():
        sim.write_curve(curve, out / f"{name}_curve.csv")
    result.policy.save(out / f"policy_stage{''.join(map(str, stages))}.npz")
    m = result.metrics
    print(f"stages {','.join(map(str, stages))}: srcc {m['srcc']:.4f}  plcc {m['plcc']:.4f}  "
          f"srcc_low {m['srcc_low']:.4f}  hit_rate {m['hit_rate']:.3f}  bias_gap {m['bias_gap']:.3f}")
    atomic_write_text(out / "train_metrics.json", json.dumps(m, indent=2) + "\n")
    return 0


def _canonical_trace(score: float, box) -> str:
    steps = [{"op": "global_look"}]
    if box is not None:
        steps += [{"op": "crop", "region": list(box)}, {"op": "observe"}]
    steps.append({"op": "score", "value": score})
    return probe.render_trace(steps)


def cmd_rewards(args, cfg) -> int:
    rows = evaluation.read_predictions(args.predictions)
    manifest = {it.id: it for it in read_manifest(args.manifest)}
    missing = [r["id"] for r in rows if r["id"] not in manifest]
    if missing:
        raise MissingIdError(missing)
    sec = _section(cfg, "rewards")
    weights = rewards.RewardWeights(
        alpha=float(args.alpha if args.alpha is not None else sec.get("alpha", rewards.DEFAULT_ALPHA)),
        beta_loc=float(args.beta_loc if args.beta_loc is not None else sec.get("beta_loc", rewards.DEFAULT_BETA_LOC)),
        gamma_fmt=float(args.gamma_fmt if args.gamma_fmt is not None else sec.get("gamma_fmt", rewards.DEFAULT_GAMMA_FMT)),
    )
    tau = float(sec.get("tau", rewards.DEFAULT_TAU))
    base = Path(args.predictions).parent
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "r_acc", "r_loc", "r_fmt", "r_total"])
    totals = []
    for r in rows:
        item = manifest[r["id"]]
        try:
            box = Region(*r["box"]) if r["box"] is not None else None
        except ArgumentError as exc:
            raise ParseError(str(exc), line=r["line"], field="x,y,w,h") from None
        trace = r["trace"]
        if trace is None:
            text = _canonical_trace(r["score"], r["box"])
        else:
            path = Path(trace) if Path(trace).is_absolute() else base / trace
            text = path.read_text(encoding="utf-8") if path.is_file() else trace
        bd = rewards.score_prediction(r["score"], box, text, item.defects, item.mos, weights, tau)
        totals.append(bd)
        w.writerow([r["id"], f"{bd.r_acc:.6f}", f"{bd.r_loc:.6f}", f"{bd.r_fmt:.6f}", f"{bd.r_total:.6f}"])
    out = Path(args.out_path) if args.out_path else _out_dir(args, cfg) / "rewards.csv"
    atomic_write_text(out, buf.getvalue())
    if totals:
        mean = {k: float(np.mean([getattr(b, k) for b in totals])) for k in ("r_acc", "r_loc", "r_fmt", "r_total")}
        print("  ".join(f"mean {k} {v:.4f}" for k, v in mean.items()))
    print(f"{len(totals)} rows -> {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    rows = evaluation.read_predictions(args.predictions)
    manifest = read_manifest(args.manifest)
    report = evaluation.evaluate([(r["id"], r["score"]) for r in rows], manifest)
    print(report.to_table(), end="")
    out = Path(args.report) if args.report else _out_dir(args, cfg) / "report.json"
    atomic_write_text(out, report.to_json())
    return 0


def cmd_score(args, cfg) -> int:
    manifest = read_manifest(args.manifest)
    sec = _section(cfg, "scorer")
    binding = ScorerBinding(
        mode=args.mode or sec.get("mode", "oracle"),
        replay_path=args.replay or sec.get("replay_path"),
        endpoint=args.endpoint or sec.get("endpoint"),
        timeout=int(args.timeout if args.timeout is not None else sec.get("timeout", 5000)),
        retries=int(args.retries if args.retries is not None else sec.get("retries", 2)),
        jitter=float(args.jitter if args.jitter is not None else sec.get("jitter", ORACLE_JITTER)),
        token=sec.get("token"),
        max_in_flight=int(_setting(args, cfg, "jobs", sec.get("max_in_flight", 4))),
    )
    k = int(args.k or sec.get("k", 6))
    groups = score_items(binding, manifest, k, seed=int(_setting(args, cfg, "seed", 0)))
    out = _out_dir(args, cfg)
    atomic_write_text(out / "groups.jsonl", "".join(json.dumps({"id": i, "scores": s}) + "\n"
                                                    for i, s in groups.items()))
    evaluation.write_predictions(out / "predictions.csv", [(i, float(np.mean(s))) for i, s in groups.items()])
    print(f"{len(groups)} items scored (k={k}, {binding.mode}) -> {out / 'predictions.csv'}")
    return 0


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def globals_parser(default):
        g = argparse.ArgumentParser(add_help=False, argument_default=default)
        g.add_argument("--config", help="TOML config file; flags override it")
        g.add_argument("--seed", type=int)
        g.add_argument("--jobs", type=int)
        g.add_argument("--out", help="output directory")
        return g

    # flags are accepted before or after the verb; the verb-level copies must not reset earlier values
    common = globals_parser(argparse.SUPPRESS)
    p = argparse.ArgumentParser(prog="qprobe", description=__doc__, parents=[globals_parser(None)])
    sub = p.add_subparsers(dest="verb", required=True)

    f = sub.add_parser("forge", parents=[common], help="synthesize a localized-degradation benchmark")
    f.add_argument("source_dir")
    f.set_defaults(func=cmd_forge)

    t = sub.add_parser("trajectories", parents=[common], help="generate a probing-trajectory corpus")
    t.add_argument("manifest")
    t.add_argument("--strategy", choices=[s.value for s in probe.CropStrategy])
    t.add_argument("--crop", type=int)
    t.add_argument("-o", "--out-path")
    t.set_defaults(func=cmd_trajectories)

    tr = sub.add_parser("train", parents=[common], help="run curriculum stages in the simulator")
    tr.add_argument("--stages", default="1,2,3")
    tr.add_argument("--policy", help="policy checkpoint (.npz) to start from")
    tr.add_argument("--strategy", choices=[s.value for s in probe.CropStrategy])
    tr.set_defaults(func=cmd_train)

    r = sub.add_parser("rewards", parents=[common], help="decoupled rewards for a predictions file")
    r.add_argument("predictions")
    r.add_argument("manifest")
    r.add_argument("--alpha", type=float)
    r.add_argument("--beta-loc", type=float)
    r.add_argument("--gamma-fmt", type=float)
    r.add_argument("-o", "--out-path")
    r.set_defaults(func=cmd_rewards)

    e = sub.add_parser("eval", parents=[common], help="per-source SRCC/PLCC report")
    e.add_argument("predictions")
    e.add_argument("manifest")
    e.add_argument("--report", help="JSON report path")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", parents=[common], help="collect K scores per item from a scorer")
    s.add_argument("manifest")
    s.add_argument("--mode", choices=["oracle", "replay", "remote"])
    s.add_argument("--replay")
    s.add_argument("--endpoint")
    s.add_argument("--timeout", type=int, help="milliseconds per attempt")
    s.add_argument("--retries", type=int)
    s.add_argument("--jitter", type=float)
    s.add_argument("-k", type=int)
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="qprobe: %(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except (QProbeError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and not isinstance(exc, QProbeError) and exc.args else exc
        log.error("%s: %s", args.verb, msg)
        return 1


if __name__ == "__main__":
    sys.exit(main())
