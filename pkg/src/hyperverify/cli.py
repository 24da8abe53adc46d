"""``hyperverify`` command line: train, enroll, verify, eval-pairs, bench, synth-data."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import IMAGE_SUFFIXES, DataError, load_image, save_image_dir, split_identities
from .evaluation import evaluate_pairs, make_pairs, read_pairs, write_pairs
from .hypernet import enroll_multi
from .modelio import (SYSTEM_FILES, ModelFormatError, load_system, load_verifier, save_system,
                      save_verifier)
from .tensor import ConfigError, ShapeError
from .verifier import count_flops, count_params, verify

log = logging.getLogger("hyperverify")

EXIT_ACCEPT, EXIT_REJECT, EXIT_ERROR = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _load_config(path) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def cmd_train(args) -> int:
    from .training import train

    config = _load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    every = max(1, config.steps // 20)

    def progress(rec):
        if rec["step"] % every == 0 or rec["step"] == config.steps - 1:
            log.info("step %d loss %.4f B=%d %s", rec["step"], rec["loss"], rec["batch_size"],
                     rec["sampling_mode"])

    res = train(config, log_path=out / SYSTEM_FILES["log"], progress=progress)
    save_system(out, res.system, config, res.cluster_index)
    print(f"wrote {out}")
    return 0


def _image_files(d: Path) -> list[Path]:
    return sorted(f for f in d.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES)


def cmd_enroll(args) -> int:
    system = load_system(args.system)
    size = system.backbone.input_size
    paths = [Path(args.image)] if args.image else []
    if args.images:
        paths += _image_files(Path(args.images))
    if not paths:
        raise ConfigError("enroll needs --image or a non-empty --images directory")
    images = [load_image(p, size) for p in paths]
    if len(images) == 1:
        ws = system.enroll(images[0])
    else:
        ws = enroll_multi(system.hypernet, system.backbone, images)
    save_verifier(args.out, ws, system.arch, system.threshold,
                  {"enrollment_images": len(images)})
    print(f"wrote {args.out}")
    return 0


def cmd_verify(args) -> int:
    model = load_verifier(args.model)
    tau = model.threshold if args.threshold is None else args.threshold
    image = load_image(args.image, model.arch.input_size).astype(np.float32)
    prob = verify(model.arch, image, model.weights)
    accept = prob >= tau
    print(f"{prob:.6f} {'ACCEPT' if accept else 'REJECT'}")
    return EXIT_ACCEPT if accept else EXIT_REJECT


def cmd_eval_pairs(args) -> int:
    system = load_system(args.system)
    pairs = read_pairs(args.pairs, args.folds)
    report = evaluate_pairs(system, pairs, args.symmetric, system.backbone.input_size)
    text = json.dumps(report.to_json(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    if args.roc:
        report.save_roc_csv(args.roc)
    log.info("accuracy %.4f +- %.4f over %d pairs", report.accuracy_mean, report.accuracy_std,
             report.num_pairs)
    return 0


def cmd_bench(args) -> int:
    model = load_verifier(args.model)
    arch = model.arch
    rng = np.random.default_rng(0)
    image = rng.uniform(-1, 1, (arch.in_channels, arch.input_size, arch.input_size)).astype(np.float32)
    verify(arch, image, model.weights)
    times = []
    for _ in range(args.iters):
        t0 = time.perf_counter()
        verify(arch, image, model.weights)
        times.append(time.perf_counter() - t0)
    ms = np.array(times) * 1e3
    print(f"params {count_params(arch)}")
    print(f"flops {count_flops(arch)}")
    print(f"latency_ms mean {ms.mean():.4f} p95 {np.percentile(ms, 95):.4f}")
    return 0


def cmd_synth_data(args) -> int:
    from .training import synth_config_from
    from .data import synth_identity_dataset

    config = _load_config(args.config)
    out = Path(args.out)
    ds = synth_identity_dataset(synth_config_from(config))
    paths = save_image_dir(ds, out)
    keys = [p.relative_to(out).as_posix() for p in paths]
    # save_image_dir writes identity-major; map dataset rows to their files
    order = np.concatenate(ds.indices_by_identity())
    row_keys = [None] * len(ds)
    for k, row in zip(keys, order):
        row_keys[row] = k
    train_ds, val_ds, test_ds = split_identities(ds, config.split, config.split_seed)
    for part in (val_ds, test_ds):
        names = set(part.identity_names)
        rows = [i for i in range(len(ds)) if ds.identity_names[ds.labels[i]] in names]
        sub_keys = [row_keys[i] for i in rows]
        pairs = make_pairs(part, config.eval_pairs, config.seed, config.eval_folds, sub_keys)
        write_pairs(pairs, out / f"pairs_{part.split}.txt")
    print(f"wrote {len(ds)} images of {ds.num_identities} identities to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hyperverify", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("train", help="train a weight generator on a frozen backbone")
    s.add_argument("--config", help="RunConfig JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("enroll", help="generate a personal verifier file")
    s.add_argument("--system", required=True)
    s.add_argument("--image")
    s.add_argument("--images", help="directory of enrollment images, averaged")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_enroll)

    s = sub.add_parser("verify", help="score one image with a verifier file")
    s.add_argument("--model", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--threshold", type=float)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("eval-pairs", help="pair accuracy with 10-fold thresholds")
    s.add_argument("--system", required=True)
    s.add_argument("--pairs", required=True)
    s.add_argument("--symmetric", action="store_true")
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--out", help="report JSON path (stdout if omitted)")
    s.add_argument("--roc", help="optional far,tar CSV path")
    s.set_defaults(func=cmd_eval_pairs)

    s = sub.add_parser("bench", help="parameter, FLOP and latency report")
    s.add_argument("--model", required=True)
    s.add_argument("--iters", type=int, default=100)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("synth-data", help="write the synthetic dataset and pair lists")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ShapeError, DataError, ModelFormatError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
