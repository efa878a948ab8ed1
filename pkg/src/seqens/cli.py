"""Experiment harness: reproducible runs emitting CSV reports and PGM dumps."""

from __future__ import annotations

import argparse
import hashlib
import os
import sys

import numpy as np

from . import config as cfgmod
from .analysis import (
    four_case_table,
    parameter_similarity_matrix,
    prediction_similarity_matrix,
    segmentation_metrics,
)
from .calibration import CalibrationConfig, temperature_scale, temperature_sweep
from .data import (
    Checkpoint,
    FormatError,
    SpecError,
    checkpoint_from_generation,
    generate_dataset,
    generation_from_checkpoint,
    load_checkpoint,
    load_split,
    save_checkpoint,
    write_manifest,
    write_sample,
)
from .ensembling import Chain, CombineStrategy, chain_predict, combine
from .nets import predict
from .training import train_generation


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def fmt(x: float) -> str:
    return f"{x:.6f}"


def worker_count() -> int:
    raw = os.environ.get("SEQENS_THREADS", "")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise UsageError(f"SEQENS_THREADS must be an integer, got {raw!r}")
    return 1


def _write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(row) + "\n")


def _run_id(resolved: str) -> str:
    return hashlib.sha256(resolved.encode("utf-8")).hexdigest()[:8]


def _metrics_header(num_classes: int) -> list[str]:
    return [
        "run_id",
        "mode",
        "member_or_generation",
        "N",
        "strategy",
        "T",
        "miou",
        "pixel_acc",
    ] + [f"iou_class{c}" for c in range(num_classes)]


def _metrics_row(run_id, mode, member, n, strategy, t, report) -> list[str]:
    row = [run_id, mode, str(member), str(n), strategy, fmt(t), fmt(report.miou), fmt(report.pixel_accuracy)]
    for _, iou in report.per_class_iou:
        row.append("" if iou is None else fmt(iou))
    return row


def dump_labels(directory: str, labels_list, num_classes: int) -> None:
    from .data import encode_pgm

    os.makedirs(directory, exist_ok=True)
    scale = 255 // (num_classes - 1)
    for i, lab in enumerate(labels_list):
        with open(os.path.join(directory, f"pred_{i:05d}.pgm"), "wb") as f:
            f.write(encode_pgm(np.asarray(lab) * scale))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = cfgmod.load_config(args.spec)
    spec = cfgmod.dataset_spec_from(cfg)
    val_count = cfgmod.val_count_from(cfg)
    if val_count > spec.count:
        raise UsageError("data.val_count exceeds data.count")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    train_count = spec.count - val_count
    for i in range(spec.count):
        from .data import generate_sample

        sample = generate_sample(spec, i)
        ip, lp = write_sample(args.out, i, sample)
        split = "train" if i < train_count else "val"
        rows.append((i, split, os.path.basename(ip), os.path.basename(lp)))
    write_manifest(args.out, rows)
    with open(os.path.join(args.out, "config.resolved"), "w", encoding="utf-8") as f:
        f.write(cfgmod.resolved_text(cfg))
    return 0


def _load_generations(paths: list[str]):
    return [generation_from_checkpoint(load_checkpoint(p)) for p in paths]


def _chain_final_probs(gens, images, self_loops=0):
    chain = Chain(list(gens), self_loops=self_loops)
    return chain_predict(chain, images)[-1].probs


def _batched_probs(probs_fn, dataset, batch_size=16):
    out = []
    for start in range(0, len(dataset), batch_size):
        images = np.stack([s.image for s in dataset[start : start + batch_size]])
        out.extend(probs_fn(images))
    return out


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    arch = cfgmod.backbone_config_from(cfg)
    tcfg = cfgmod.train_config_from(cfg)
    train = load_split(args.data, "train")
    val = load_split(args.data, "val")

    conditions = _load_generations(args.condition or [])
    index = 1 if arch.conditioning not in ("none", "fixed_embedding") else 0
    from .nets import build_generation

    g = build_generation(arch, seed=tcfg.seed, index=index)
    provider = None
    if arch.conditioning in ("adon", "early_fusion", "late_fusion"):
        if not conditions:
            raise UsageError("conditioned training needs at least one --condition checkpoint")
        if len(conditions) == 1:
            provider = lambda images: predict(conditions[0], images).probs
        else:
            rng = np.random.Generator(np.random.Philox(key=np.uint64(tcfg.seed)))
            provider = lambda images: predict(
                conditions[int(rng.integers(0, len(conditions)))], images
            ).probs
    elif conditions:
        raise UsageError("--condition given but this architecture takes no conditioning")

    history = train_generation(g, train, val, tcfg, provider)
    g.seed = tcfg.seed

    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "generation.ckpt"), checkpoint_from_generation(g))
    resolved = cfgmod.resolved_text(cfg)
    with open(os.path.join(args.out, "config.resolved"), "w", encoding="utf-8") as f:
        f.write(resolved)
    rows = [["step_loss", str(i), fmt(v)] for i, v in enumerate(history.step_loss)]
    rows += [["val_miou", str(i), fmt(v)] for i, v in enumerate(history.epoch_val_miou)]
    rows.append(["final_lr", "0", fmt(history.final_lr)])
    _write_csv(os.path.join(args.out, "history.csv"), ["record", "index", "value"], rows)
    return 0


def cmd_eval(args) -> int:
    gens = _load_generations(args.ckpt)
    val = load_split(args.data, "val")
    if not val:
        raise FormatError("no validation samples in the data directory")
    num_classes = gens[0].config.num_classes
    gts = [s.label for s in val]
    run_id = _run_id(",".join(args.ckpt))
    rows = []
    if args.chain:
        probs = _batched_probs(
            lambda im: _chain_final_probs(gens, im, self_loops=args.self_loops), val
        )
        labels = [np.argmax(p, axis=0) for p in probs]
        report = segmentation_metrics(labels, gts, num_classes, args.ignore_label)
        rows.append(
            _metrics_row(run_id, "seq", len(gens) - 1, len(gens), "chain", 1.0, report)
        )
        if args.dump:
            dump_labels(args.dump, labels, num_classes)
    else:
        for i, g in enumerate(gens):
            probs = _batched_probs(lambda im: predict(g, im).probs, val)
            labels = [np.argmax(p, axis=0) for p in probs]
            report = segmentation_metrics(labels, gts, num_classes, args.ignore_label)
            rows.append(_metrics_row(run_id, "single", i, 1, "none", 1.0, report))
            if args.dump:
                dump_labels(os.path.join(args.dump, f"member{i}"), labels, num_classes)
    _write_csv(args.report, _metrics_header(num_classes), rows)
    return 0


def cmd_ensemble(args) -> int:
    gens = _load_generations(args.ckpt)
    val = load_split(args.data, "val")
    num_classes = gens[0].config.num_classes
    gts = [s.label for s in val]
    strategy = CombineStrategy(args.strategy)
    run_id = _run_id(args.mode + "," + ",".join(args.ckpt))
    if args.mode == "seq":
        probs = _batched_probs(
            lambda im: _chain_final_probs(gens, im, self_loops=args.self_loops), val
        )
    else:
        member_probs = [
            _batched_probs(lambda im, g=g: predict(g, im).probs, val) for g in gens
        ]
        if args.temperature != 1.0:
            member_probs = []
            for g in gens:
                logits = _batched_probs(lambda im, g=g: predict(g, im).logits, val)
                member_probs.append(
                    [temperature_scale(l[None], args.temperature)[0] for l in logits]
                )
        probs = [
            combine([mp[i][None] for mp in member_probs], strategy)[0]
            for i in range(len(val))
        ]
    labels = [np.argmax(p, axis=0) for p in probs]
    report = segmentation_metrics(labels, gts, num_classes, args.ignore_label)
    rows = [
        _metrics_row(
            run_id, args.mode, "ensemble", len(gens), args.strategy, args.temperature, report
        )
    ]
    _write_csv(args.report, _metrics_header(num_classes), rows)
    if args.dump:
        dump_labels(args.dump, labels, num_classes)
    return 0


def _calibration_rows(report, num_bins):
    rows = []
    for t, ece in report.per_temperature_ece:
        row = [fmt(t), fmt(ece)]
        for n, conf, acc in report.per_bin_by_temperature[t]:
            row += [str(n), fmt(conf), fmt(acc)]
        rows.append(row)
    header = ["T", "ece"]
    for b in range(num_bins):
        header += [f"bin{b}_count", f"bin{b}_conf", f"bin{b}_acc"]
    return header, rows


def cmd_calibrate(args) -> int:
    gens = _load_generations(args.ckpt)
    val = load_split(args.data, "val")
    grid = tuple(sorted(float(t) for t in args.grid.split(",")))
    cfg = CalibrationConfig(num_bins=args.bins, temperature_grid=grid)

    def logit_source(dataset):
        if len(gens) == 1:
            return _batched_probs(lambda im: predict(gens[0], im).logits, dataset)
        return _batched_probs(
            lambda im: chain_predict(Chain(list(gens)), im)[-1].logits, dataset
        )

    report = temperature_sweep(logit_source, val, cfg, args.ignore_label)
    header, rows = _calibration_rows(report, cfg.num_bins)
    _write_csv(args.report, header, rows)
    return 0


def cmd_diversity(args) -> int:
    gens = _load_generations(args.ckpt)
    val = load_split(args.data, "val")
    members = [lambda im, g=g: predict(g, im).probs for g in gens]
    pred_mat = prediction_similarity_matrix(members, val)
    param_mat = parameter_similarity_matrix(gens)
    rows = []
    for i in range(len(gens)):
        for j in range(len(gens)):
            rows.append([str(i), str(j), fmt(pred_mat[i, j]), fmt(param_mat[i, j])])
    _write_csv(args.report, ["i", "j", "pred_cosine", "param_cosine"], rows)
    return 0


def cmd_fourcase(args) -> int:
    if len(args.ckpt) != 2:
        raise UsageError("fourcase needs exactly two --ckpt checkpoints")
    g0, g1 = _load_generations(args.ckpt)
    val = load_split(args.data, "val")
    gts = [s.label for s in val]
    p0 = _batched_probs(lambda im: predict(g0, im).probs, val)
    if g1.config.conditioning in ("none", "fixed_embedding"):
        p1 = _batched_probs(lambda im: predict(g1, im).probs, val)
    else:
        p1 = _batched_probs(lambda im: _chain_final_probs([g0, g1], im), val)
    l0 = [np.argmax(p, axis=0) for p in p0]
    l1 = [np.argmax(p, axis=0) for p in p1]
    table = four_case_table(l0, l1, gts, args.ignore_label)
    rows = [
        [case, str(table.counts[case]), fmt(table.fractions[case])]
        for case in ("both_correct", "g0_only", "g1_only", "both_wrong")
    ]
    _write_csv(args.report, ["case", "count", "fraction"], rows)
    return 0


def cmd_reproduce(args) -> int:
    from .recipes import RECIPES, reproduce_figure

    if args.name not in RECIPES:
        raise UsageError(f"unknown recipe {args.name!r}; choose from {sorted(RECIPES)}")
    reproduce_figure(args.name, args.out)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="seqens", description="sequential segmentation ensembling lab")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    sp.add_argument("--spec", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train one generation")
    sp.add_argument("--config", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--condition", action="append", default=[], metavar="CKPT")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("eval", help="evaluate checkpoints on the val split")
    sp.add_argument("--ckpt", action="append", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--chain", action="store_true")
    sp.add_argument("--self-loops", type=int, default=0, dest="self_loops")
    sp.add_argument("--ignore-label", type=int, default=255, dest="ignore_label")
    sp.add_argument("--dump", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("ensemble", help="evaluate a simple or sequential ensemble")
    sp.add_argument("--mode", choices=("sim", "seq"), required=True)
    sp.add_argument(
        "--strategy",
        choices=("uniform", "confidence_weighted", "median", "vote"),
        default="uniform",
    )
    sp.add_argument("--ckpt", action="append", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--self-loops", type=int, default=0, dest="self_loops")
    sp.add_argument("--t", type=float, default=1.0, dest="temperature")
    sp.add_argument("--ignore-label", type=int, default=255, dest="ignore_label")
    sp.add_argument("--dump", default=None)
    sp.set_defaults(fn=cmd_ensemble)

    sp = sub.add_parser("calibrate", help="temperature sweep on cached logits")
    sp.add_argument("--ckpt", action="append", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--grid", default="0.5,1,2,4,8")
    sp.add_argument("--bins", type=int, default=10)
    sp.add_argument("--report", required=True)
    sp.add_argument("--ignore-label", type=int, default=255, dest="ignore_label")
    sp.set_defaults(fn=cmd_calibrate)

    sp = sub.add_parser("diversity", help="pairwise prediction/parameter cosine matrices")
    sp.add_argument("--ckpt", action="append", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.set_defaults(fn=cmd_diversity)

    sp = sub.add_parser("fourcase", help="error transition table between two stages")
    sp.add_argument("--ckpt", action="append", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--report", required=True)
    sp.add_argument("--ignore-label", type=int, default=255, dest="ignore_label")
    sp.set_defaults(fn=cmd_fourcase)

    sp = sub.add_parser("reproduce", help="run a named desk-scale figure recipe")
    sp.add_argument("--name", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_reproduce)

    return p


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (FormatError, SpecError, cfgmod.ConfigFileError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
