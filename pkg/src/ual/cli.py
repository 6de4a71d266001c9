"""Command-line entry point: simulate, train, eval, gradcheck.

Every command is deterministic given ``--seed`` and its inputs; no wall
clock or other entropy leaks into any output. Exit codes: 0 success,
1 usage (bad flags), 2 data error (malformed config/spec/dataset files,
hash mismatches), 3 numeric failure.

Config and simulation-spec files are flat ``key = value`` text; ``#``
starts a comment. Unknown keys are rejected so typos fail loudly. The
``UAL_LOG_LEVEL`` environment variable (error/info/debug) controls
stderr chatter.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import __version__
from .datagen_metrics import (
    Dataset,
    generate_dataset,
    load_dataset,
    save_dataset,
    spec_from_mapping,
)
from .errors import ConfigError, DataError, NumericError, UalError
from .numerics import ParameterStore, SeededRng, gradient_check
from .pipeline import (
    ABLATIONS,
    BRANCH_TAGS,
    FUSION_STRATEGIES,
    FaceBranch,
    ObjectBranch,
    TrainingConfig,
    build_branches,
    config_from_mapping,
    evaluate_dataset,
    register_branches,
    train_model,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

log = logging.getLogger("ual")


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise SystemExit_(EXIT_USAGE, f"error: {message}")


class SystemExit_(Exception):
    def __init__(self, code: int, message: str = ""):
        super().__init__(message)
        self.code = code
        self.message = message


def _setup_logging() -> None:
    level_name = os.environ.get("UAL_LOG_LEVEL", "info").strip().lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level_name not in levels:
        raise SystemExit_(EXIT_USAGE, f"UAL_LOG_LEVEL must be error/info/debug, got {level_name!r}")
    logging.basicConfig(stream=sys.stderr, level=levels[level_name], format="%(message)s")


def parse_kv_file(path) -> dict[str, str]:
    """Parse flat ``key = value`` lines; '#' comments; blank lines ignored."""
    out: dict[str, str] = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise DataError(f"{path}: line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _bundled(name: str) -> str:
    return resources.files("ual.configs").joinpath(name).read_text(encoding="utf-8")


def _bundled_mapping(name: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(_bundled(name).splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path: str | None, overrides: dict) -> TrainingConfig:
    mapping = parse_kv_file(path) if path else _bundled_mapping("synthetic-default.cfg")
    source = path or "bundled synthetic-default.cfg"
    cfg = config_from_mapping(mapping, source=str(source))
    if overrides:
        cfg = replace(cfg, **overrides)
        cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    mapping = parse_kv_file(args.spec) if args.spec else _bundled_mapping("synthetic-default.gen")
    source = args.spec or "bundled synthetic-default.gen"
    spec = spec_from_mapping(mapping, source=str(source))
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.num_groups is not None:
        updates["num_groups"] = args.num_groups
    if args.partition is not None:
        updates["partition"] = args.partition
    if updates:
        spec = replace(spec, **updates)
        spec.validate()
    dataset = generate_dataset(spec)
    save_dataset(dataset, args.out)
    log.info(
        "wrote %s: %d groups (%s)", args.out, len(dataset), json.dumps(dataset.synthesis_stats)
    )
    return EXIT_OK


def _dims(dataset: Dataset) -> dict:
    return {
        "face_dim": dataset.face_dim,
        "object_dim": dataset.object_dim,
        "scene_dim": dataset.scene_dim,
        "num_classes": dataset.num_classes,
    }


def cmd_train(args) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    config = _load_config(args.config, overrides)
    train_ds = load_dataset(args.train)
    val_ds = load_dataset(args.val)
    dims = _dims(train_ds)
    if _dims(val_ds) != dims:
        raise DataError("train and val datasets disagree on dims/classes")
    tags = BRANCH_TAGS if args.branch == "all" else (args.branch,)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    loss_files = {
        tag: open(out_dir / f"{tag}_loss.csv", "w", encoding="utf-8")
        for tag in tags
    }
    for fh in loss_files.values():
        fh.write("epoch,cls,kl,rank,rec,total\n")
    val_fh = open(out_dir / "val_metrics.jsonl", "w", encoding="utf-8")

    def on_epoch(epoch, breakdowns, eval_result):
        for tag, bd in breakdowns.items():
            loss_files[tag].write(
                f"{epoch},{bd.cls!r},{bd.kl!r},{bd.rank!r},{bd.rec!r},{bd.total!r}\n"
            )
        entry = {"record": "val_epoch", "epoch": epoch}
        for tag, report in eval_result.branch_reports.items():
            entry[tag] = {
                "micro": report.micro_accuracy,
                "macro_recall": report.macro_recall,
            }
        entry["fused"] = {
            "micro": eval_result.fused_report.micro_accuracy,
            "macro_recall": eval_result.fused_report.macro_recall,
        }
        val_fh.write(json.dumps(entry) + "\n")
        log.info(
            "epoch %d: %s",
            epoch,
            " ".join(f"{t}={bd.total:.4f}" for t, bd in breakdowns.items()),
        )

    try:
        result = train_model(
            train_ds, config, val_ds=val_ds, branch_tags=tags,
            ablation=args.ablation, on_epoch=on_epoch,
        )
    finally:
        for fh in loss_files.values():
            fh.close()
        val_fh.close()

    model_files = {}
    for tag in result.branches:
        filename = f"{tag}.params.json"
        result.store.subset(f"{tag}.").save(out_dir / filename)
        model_files[tag] = filename
    manifest = {
        "tool_version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "ablation": args.ablation,
        "branches": list(result.branches),
        "dims": dims,
        "datasets": {
            "train": {"path": str(args.train), "sha256": sha256_file(args.train)},
            "val": {"path": str(args.val), "sha256": sha256_file(args.val)},
        },
        "models": model_files,
        "best_epoch": result.best_epoch,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    log.info("wrote %s", out_dir / "manifest.json")
    return EXIT_OK


def _restore_from_manifest(manifest: dict, manifest_dir: Path):
    config = config_from_mapping(
        {k: str(v) for k, v in manifest["config"].items()}, source="manifest config"
    )
    branches = build_branches(config, manifest["dims"], tuple(manifest["branches"]))
    store = ParameterStore()
    register_branches(store, branches, config.seed)
    for tag in branches:
        path = manifest_dir / manifest["models"][tag]
        if not path.exists():
            raise DataError(f"missing model file {path}")
        _restore_branch(store, tag, path)
    return config, branches, store


def _restore_branch(store: ParameterStore, tag: str, path: Path) -> None:
    sub = ParameterStore()
    for name in store.names():
        if name.startswith(f"{tag}."):
            sub.register(name, store.get(name))
    sub.restore(path)
    for name in sub.names():
        store.set(name, sub.get(name))


def cmd_eval(args) -> int:
    manifest_path = Path(args.manifest)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    data_hash = sha256_file(args.data)
    known = {entry["sha256"] for entry in manifest.get("datasets", {}).values()}
    if data_hash not in known and not args.force:
        raise DataError(
            f"{args.data}: content hash {data_hash[:12]}... does not match the manifest "
            "(use --force to evaluate anyway)"
        )
    config, branches, store = _restore_from_manifest(manifest, manifest_path.parent)
    dataset = load_dataset(args.data)
    seed = args.seed if args.seed is not None else config.seed
    ablation = args.ablation or manifest.get("ablation", "full")

    try:
        sample_counts = [int(tok) for tok in str(args.mc_samples).split(",")] if args.mc_samples else [config.mc_samples]
    except ValueError as exc:
        raise SystemExit_(EXIT_USAGE, f"--mc-samples expects ints: {exc}") from exc
    if any(n < 1 for n in sample_counts):
        raise SystemExit_(EXIT_USAGE, "--mc-samples values must be >= 1")

    out_dir = Path(args.out) if args.out else manifest_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.jsonl"
    sweep_rows = []
    with open(report_path, "w", encoding="utf-8") as fh:
        for n in sample_counts:
            result = evaluate_dataset(
                store, branches, dataset, config, seed,
                n_samples=n, ablation=ablation, fusion=args.fusion,
                collect_diagnostics=True,
            )
            meta = {
                "record": "run",
                "mc_samples": n,
                "fusion": args.fusion,
                "ablation": ablation,
                "seed": seed,
                "data": str(args.data),
            }
            fh.write(json.dumps(meta) + "\n")
            for tag, report in result.branch_reports.items():
                fh.write(
                    json.dumps({"record": "branch_metrics", "mc_samples": n, "branch": tag,
                                **report.to_dict()}) + "\n"
                )
            fh.write(
                json.dumps({"record": "fused_metrics", "mc_samples": n,
                            **result.fused_report.to_dict()}) + "\n"
            )
            for rec in result.records:
                fh.write(json.dumps({**rec, "mc_samples": n}) + "\n")
            sweep_rows.append((n, result))
    for n, result in sweep_rows:
        print(f"== mc_samples = {n} (fusion {args.fusion}, ablation {ablation}) ==")
        for tag, report in result.branch_reports.items():
            print(report.format_table(title=f"[{tag}]"))
        print(result.fused_report.format_table(title="[fused]"))
    if len(sweep_rows) > 1:
        print("== sweep ==")
        print(f"{'N':>6} {'fused micro':>12} {'face micro':>11}")
        for n, result in sweep_rows:
            face = result.branch_reports.get("face")
            face_str = f"{100 * face.micro_accuracy:11.2f}" if face else " " * 11
            print(f"{n:>6} {100 * result.fused_report.micro_accuracy:12.2f} {face_str}")
    log.info("wrote %s", report_path)
    return EXIT_OK


def _gradcheck_units(seed: int):
    """Scenario list: (name, loss_fn factory, store). Shared by cmd and tests."""
    from .losses import LossWeights

    units = []
    rng = SeededRng(seed)

    def face_scenario(name, weights, corrupt=False):
        r = rng.derive(name)
        branch = FaceBranch(in_dim=6, latent_dim=5, num_classes=3)
        store = ParameterStore()
        branch.register(store, r.derive("init"))
        store.get("face.embed.logvar.weight")[...] = 0.3 * r.normals((5, 6))
        store.get("face.embed.logvar.bias")[...] = 0.2 * r.normals(5)
        faces = r.normals((4, 6))
        eps = r.normals((4, 5))
        label = r.integer(3)

        def loss_fn(s):
            bd, g = branch.loss_and_grads(s, faces, label, eps, weights, 0.5, 5.0)
            return bd.total, g

        if corrupt:
            inner = loss_fn

            def loss_fn(s):  # noqa: F811 - deliberate corruption of the backward pass
                total, g = inner(s)
                return total, {k: 2.0 * v for k, v in g.items()}

        units.append((name, loss_fn, store))

    face_scenario("face.cls", LossWeights(lambda2=0.0, lambda3=0.0, lambda4=0.0))
    face_scenario("face.kl", LossWeights(lambda2=1.0, lambda3=0.0, lambda4=0.0))
    face_scenario("face.rank", LossWeights(lambda2=0.0, lambda3=1.0, lambda4=0.0))
    face_scenario("face.rec", LossWeights(lambda2=0.0, lambda3=0.0, lambda4=1.0))
    face_scenario("face.total", LossWeights())

    r = rng.derive("object")
    branch = ObjectBranch(in_dim=4, latent_dim=5, num_classes=3)
    store = ParameterStore()
    branch.register(store, r.derive("init"))
    store.get("object.embed.logvar.weight")[...] = 0.3 * r.normals((5, 4))
    objects = r.normals((3, 4))
    eps = r.normals((3, 5))
    label = r.integer(3)
    weights = LossWeights(lambda2=0.5)

    def object_loss(s, _b=branch, _o=objects, _l=label, _e=eps, _w=weights):
        bd, g = _b.loss_and_grads(s, _o, _l, _e, _w)
        return bd.total, g

    units.append(("object.total", object_loss, store))
    return units


def cmd_gradcheck(args) -> int:
    tolerance = args.tolerance
    all_ok = True
    print(f"{'unit':>14} {'seed':>6} {'max rel err':>14} {'status':>8}")
    for seed in range(args.seeds):
        for name, loss_fn, store in _gradcheck_units(seed):
            res = gradient_check(loss_fn, store, tolerance=tolerance)
            status = "pass" if res.passed else "FAIL"
            all_ok = all_ok and res.passed
            print(f"{name:>14} {seed:>6} {res.worst:>14.3e} {status:>8}")
    # self-test: a deliberately broken backward (x2) must be caught
    units = _gradcheck_units(0)
    name, loss_fn, store = units[0]

    def corrupted(s):
        total, g = loss_fn(s)
        return total, {k: 2.0 * v for k, v in g.items()}

    res = gradient_check(corrupted, store, tolerance=tolerance)
    caught = not res.passed
    print(f"{'self-test':>14} {'-':>6} {res.worst:>14.3e} {'pass' if caught else 'FAIL':>8}")
    all_ok = all_ok and caught
    if not all_ok:
        raise NumericError("gradient check failed")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="ual", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic group dataset")
    p.add_argument("--spec", help="simulation spec file (key = value); bundled default if omitted")
    p.add_argument("--out", required=True, help="output dataset path")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--num-groups", type=int, help="override the spec group count")
    p.add_argument("--partition", help="override the spec partition tag (train/val/...)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train branches and write models + manifest")
    p.add_argument("--config", help="training config file; bundled default if omitted")
    p.add_argument("--train", required=True, help="training dataset path")
    p.add_argument("--val", required=True, help="validation dataset path")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--epochs", type=int, help="override the config epoch count")
    p.add_argument("--branch", choices=BRANCH_TAGS + ("all",), default="all")
    p.add_argument("--ablation", choices=ABLATIONS, default="full")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained manifest on a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fusion", choices=FUSION_STRATEGIES, default="pwfs")
    p.add_argument("--ablation", choices=ABLATIONS, help="override the trained ablation")
    p.add_argument("--mc-samples", help="sample count, or comma list for a sweep")
    p.add_argument("--seed", type=int, help="inference seed (default: manifest seed)")
    p.add_argument("--out", help="report directory (default: manifest directory)")
    p.add_argument("--force", action="store_true", help="skip the dataset hash check")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every unit")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seeds", type=int, default=5, help="random instantiations per unit")
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit_ as exc:
        if exc.message:
            print(exc.message, file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except UalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
