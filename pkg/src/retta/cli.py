"""Command-line surface: generate datasets, run methods, verify, analyze.

Every command writes a manifest.json next to its outputs with the fully
resolved configuration (defaults included), input paths, and SHA-256 hashes
of every written artifact, so a run can be audited and reproduced exactly.

Exit codes: 0 success, 1 validation error, 2 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import adapter, analysis, datagen, model

METHODS = (
    "retta",
    "retta-no-pb",
    "retta-no-dc",
    "retta-no-pb-dc",
    "retta-no-entw",
    "retta-no-simw",
    "entmin",
    "zeroshot",
)

_VARIANT_OF = {
    "retta": "full",
    "retta-no-pb": "no-pb",
    "retta-no-dc": "no-dc",
    "retta-no-pb-dc": "no-pb-dc",
    "retta-no-entw": "no-entw",
    "retta-no-simw": "no-simw",
}


class ValidationError(Exception):
    pass


def _load_config(path: str, cls, name: str):
    """Build a dataclass config from JSON, naming any bad field."""
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ValidationError(f"{name} config not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{name} config {path}: invalid JSON ({exc.msg})")
    if not isinstance(data, dict):
        raise ValidationError(f"{name} config {path}: expected a JSON object")
    known = {f.name for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ValidationError(f"{name} config: unknown field '{key}'")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{name} config: {exc}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: dict,
                    outputs: list[Path], seed: int, method: str | None = None) -> Path:
    manifest = {
        "command": command,
        "method": method,
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": {p.name: _sha256(p) for p in sorted(outputs)},
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def cmd_gen(args) -> int:
    cfg = _load_config(args.config, datagen.StreamConfig, "stream")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    samples, bank = datagen.generate(cfg)
    dataset_path = out_dir / "dataset.jsonl"
    datagen.save_jsonl(samples, dataset_path)
    meta_path = out_dir / "metadata.json"
    datagen.save_metadata(cfg, bank, meta_path)
    bank_path = out_dir / "textbank.json"
    model.save_text_bank(bank, bank_path)
    _write_manifest(
        out_dir,
        command="gen",
        config=asdict(cfg),
        inputs={"config": str(args.config)},
        outputs=[dataset_path, meta_path, bank_path],
        seed=cfg.seed,
    )
    print(f"wrote {len(samples)} samples to {dataset_path}")
    return 0


def _load_dataset(dataset_dir: str, renormalize: bool):
    ddir = Path(dataset_dir)
    dataset_path = ddir / "dataset.jsonl"
    bank_path = ddir / "textbank.json"
    if not dataset_path.exists():
        raise ValidationError(f"dataset not found: {dataset_path}")
    if not bank_path.exists():
        raise ValidationError(f"text bank not found: {bank_path}")
    bank = model.load_text_bank(bank_path, renormalize=renormalize)
    samples, meta = datagen.load_jsonl(
        dataset_path, expected_dim=bank.dim, renormalize=renormalize
    )
    return samples, bank, meta


def _run_method(method: str, samples, cfg: adapter.AdapterConfig, bank):
    if method in _VARIANT_OF:
        run_cfg = adapter.ablation_config(cfg, _VARIANT_OF[method])
        return adapter.run_stream(samples, run_cfg, bank)
    if method == "entmin":
        return adapter.run_entropy_baseline(samples, cfg, bank)
    if method == "zeroshot":
        return adapter.run_zero_shot(samples, bank)
    raise ValidationError(f"unknown method '{method}' (choose from {', '.join(METHODS)})")


def cmd_run(args) -> int:
    if args.method not in METHODS:
        raise ValidationError(f"unknown method '{args.method}' (choose from {', '.join(METHODS)})")
    cfg = _load_config(args.config, adapter.AdapterConfig, "adapter")
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    samples, bank, meta = _load_dataset(args.dataset, args.renormalize)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    outcomes = _run_method(args.method, samples, cfg, bank)
    bins = None
    if len({s.domain_id for s in samples}) >= 2:
        bins = analysis.similarity_bins(samples, seed=cfg.seed)
    report = analysis.evaluate(samples, outcomes, same_domain_ratio_bins=bins)
    written = analysis.write_report_files(report, out_dir)

    trace_path = out_dir / "trace.jsonl"
    with open(trace_path, "w") as fh:
        for s, o in zip(samples, outcomes):
            fh.write(json.dumps({
                "domain": s.domain_id,
                "true_label": s.true_label,
                "predicted": o.prediction.pseudo_label,
                "zero_shot": o.zero_shot.pseudo_label,
                "support_domains": list(o.support_domain_ids),
            }))
            fh.write("\n")
    written.append(trace_path)

    _write_manifest(
        out_dir,
        command="run",
        config=asdict(cfg),
        inputs={"dataset": str(args.dataset), "config": str(args.config)},
        outputs=written,
        seed=cfg.seed,
        method=args.method,
    )
    print(f"method={args.method} macro_accuracy={report.macro_average:.4f} "
          f"overall={report.overall_accuracy:.4f}")
    return 0


def cmd_analyze(args) -> int:
    run_dir = Path(args.run)
    trace_path = run_dir / "trace.jsonl"
    if not trace_path.exists():
        raise ValidationError(f"trace not found: {trace_path}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    rows = []
    with open(trace_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"trace line {lineno}: invalid JSON ({exc.msg})")

    domains = sorted({r["domain"] for r in rows})
    dindex = {d: i for i, d in enumerate(domains)}
    D = len(domains)
    comp_sums = np.zeros((D, D))
    comp_counts = np.zeros(D)
    for r in rows:
        sup = r.get("support_domains") or []
        if not sup:
            continue
        vec = np.zeros(D)
        for d in sup:
            if d in dindex:
                vec[dindex[d]] += 1
        if vec.sum() > 0:
            comp_sums[dindex[r["domain"]]] += vec / vec.sum()
            comp_counts[dindex[r["domain"]]] += 1
    composition = np.zeros((D, D))
    for i in range(D):
        if comp_counts[i] > 0:
            composition[i] = 100.0 * comp_sums[i] / comp_counts[i]

    comp_path = out_dir / "composition.csv"
    with open(comp_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query_domain"] + domains)
        for d, row in zip(domains, composition):
            writer.writerow([d] + [f"{x:.4f}" for x in row])

    written = [comp_path]
    dataset_dir = args.dataset
    if dataset_dir is None:
        # default: the dataset recorded in the run's manifest
        manifest_path = run_dir / "manifest.json"
        if manifest_path.exists():
            with open(manifest_path) as fh:
                dataset_dir = json.load(fh).get("inputs", {}).get("dataset")
    if dataset_dir is not None and Path(dataset_dir).exists():
        samples, bank, _ = _load_dataset(dataset_dir, renormalize=False)
        bins = analysis.similarity_bins(samples, seed=args.seed or 0)
        bins_path = out_dir / "bins.csv"
        with open(bins_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin", "same_domain_ratio"])
            for i, r in enumerate(bins, start=1):
                writer.writerow([i, f"{r:.6f}"])
        written.append(bins_path)

    _write_manifest(
        out_dir,
        command="analyze",
        config={},
        inputs={"run": str(args.run), "dataset": str(dataset_dir)},
        outputs=written,
        seed=args.seed or 0,
    )
    print(f"wrote {', '.join(str(p) for p in written)}")
    return 0


def _verify_grad(seed: int) -> tuple[bool, str]:
    """Closed-form gradients vs central finite differences, 100 random draws."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        C = int(rng.integers(2, 11))
        d = int(rng.integers(2, 33))
        emb = rng.standard_normal((C, d))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        bank = model.TextBank(emb, float(rng.uniform(0.0, np.log(10.0))),
                              [f"c{i}" for i in range(C)])
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        params = model.AffineParams(rng.uniform(0.5, 1.5, d), rng.uniform(-0.3, 0.3, d))
        exact = model.sample_grad(v, params, bank)
        fd = model.finite_diff_grad(v, params, bank, step=1e-5)
        num = np.linalg.norm(
            np.concatenate([exact.d_weight - fd.d_weight, exact.d_bias - fd.d_bias])
        )
        den = np.linalg.norm(np.concatenate([exact.d_weight, exact.d_bias]))
        worst = max(worst, num / max(den, 1e-300))
    return worst < 1e-6, f"max rel err {worst:.3e} (threshold 1e-6)"


def _verify_theorem(seed: int) -> tuple[bool, str]:
    """Closed-form importance prediction vs an actual GD step, 100 seeds."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(4, 17))
        emb = rng.standard_normal((2, d))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        bank = model.TextBank(emb, float(rng.uniform(0.0, np.log(5.0))), ["c0", "c1"])
        feats = rng.standard_normal((int(rng.integers(4, 33)), d))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        check = analysis.verify_feature_importance(list(feats), bank, eta=1e-3)
        worst = max(worst, check.max_abs_gap)
    return worst < 1e-12, f"max gap {worst:.3e} (threshold 1e-12)"


def _verify_cache(seed: int) -> tuple[bool, str]:
    """Cached vs recomputed engine logits on a small mixed stream."""
    cfg = datagen.StreamConfig(
        num_classes=4, num_domains=3, dim=16, samples_per_domain=80, seed=seed
    )
    samples, bank = datagen.generate(cfg)
    acfg = adapter.AdapterConfig(
        capacity_per_class=40, retrieve_k=3, beta=5.0, lr=1e-2, batch_size=20, seed=seed
    )
    cached = adapter.run_stream(samples, acfg, bank, recompute_grads=False)
    naive = adapter.run_stream(samples, acfg, bank, recompute_grads=True)
    worst = 0.0
    for a, b in zip(cached, naive):
        gap = np.max(np.abs(a.prediction.logits - b.prediction.logits))
        scale = max(float(np.max(np.abs(b.prediction.logits))), 1e-300)
        worst = max(worst, gap / scale)
    return worst < 1e-12, f"max logit rel err {worst:.3e} (threshold 1e-12)"


def cmd_verify(args) -> int:
    suites = {
        "grad": _verify_grad,
        "theorem": _verify_theorem,
        "cache": _verify_cache,
    }
    selected = list(suites) if args.suite == "all" else [args.suite]
    seed = args.seed if args.seed is not None else 0
    all_ok = True
    for name in selected:
        ok, detail = suites[name](seed)
        all_ok &= ok
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all_ok else 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="retta",
        description="Retrieval-cached episodic test-time adaptation: "
        "dataset generation, runs, verification, analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset")
    p_gen.add_argument("--config", required=True, help="stream config JSON")
    p_gen.add_argument("--out", required=True, help="output directory")
    p_gen.add_argument("--seed", type=int, default=None, help="override config seed")
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="run a method over a dataset")
    p_run.add_argument("--dataset", required=True, help="dataset directory (from gen)")
    p_run.add_argument("--method", required=True, choices=METHODS)
    p_run.add_argument("--config", required=True, help="adapter config JSON")
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--seed", type=int, default=None, help="override config seed")
    p_run.add_argument("--renormalize", action="store_true",
                       help="rescale off-unit vectors instead of rejecting them")
    p_run.set_defaults(func=cmd_run)

    p_verify = sub.add_parser("verify", help="run numerical verification suites")
    p_verify.add_argument("--suite", choices=["grad", "theorem", "cache", "all"],
                          default="all")
    p_verify.add_argument("--seed", type=int, default=None)
    p_verify.set_defaults(func=cmd_verify)

    p_analyze = sub.add_parser("analyze", help="recompute diagnostics from run artifacts")
    p_analyze.add_argument("--run", required=True, help="run directory (from run)")
    p_analyze.add_argument("--out", required=True, help="output directory")
    p_analyze.add_argument("--dataset", default=None,
                           help="dataset directory (default: from the run manifest)")
    p_analyze.add_argument("--seed", type=int, default=None)
    p_analyze.set_defaults(func=cmd_analyze)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
