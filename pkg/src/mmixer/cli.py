"""Command-line entry points: train, eval, gradcheck, ablate, gen-data.

Exit codes: 0 success, 1 check/assertion failure (gradient check over
tolerance, non-finite loss), 2 usage or I/O errors (bad config, missing
files, incompatible checkpoints).
"""

import argparse
import hashlib
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfg_mod
from . import gradcheck as gc_mod
from . import network as net
from . import synthdata as sd
from .checkpoint import CheckpointError
from .network import ModelConfig
from .tensor import Tensor
from .util import ConfigError, NumericError, derive_seed, make_rng

log = logging.getLogger(__name__)

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2

ABLATION_CONTENTS = ("cfem", "cross-concat", "self")
ABLATION_FUSIONS = ("bank", "concat")
GRADCHECK_TOLERANCE = 1e-4


# -- shared plumbing ---------------------------------------------------------


def _add_run_flags(p):
    p.add_argument("--config", help="INI config file; explicit flags override it")
    m = p.add_argument_group("model")
    m.add_argument("--modalities", type=int)
    m.add_argument("--frames", type=int)
    m.add_argument("--feat-channels", dest="feat_channels", type=int)
    m.add_argument("--hidden-dim", dest="hidden_dim", type=int)
    m.add_argument("--grid-h", dest="grid_h", type=int)
    m.add_argument("--grid-w", dest="grid_w", type=int)
    m.add_argument("--bank-size", dest="bank_size", type=int)
    m.add_argument("--classes", type=int)
    m.add_argument("--heads", type=int)
    m.add_argument("--content", choices=ABLATION_CONTENTS)
    m.add_argument("--fusion", choices=ABLATION_FUSIONS)
    m.add_argument("--precision", choices=("float32", "float64"))
    t = p.add_argument_group("task")
    t.add_argument("--task", choices=("xor", "redundant", "single"))
    t.add_argument("--noise", type=float)
    t.add_argument("--train-samples", dest="train_samples", type=int)
    t.add_argument("--test-samples", dest="test_samples", type=int)
    tr = p.add_argument_group("train")
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--batch-size", dest="batch_size", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--probe-steps", dest="probe_steps", type=int)
    tr.add_argument("--probe-lr", dest="probe_lr", type=float)
    tr.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--data-cache", dest="data_cache")


_RUN_FIELDS = (
    "modalities", "frames", "feat_channels", "hidden_dim", "grid_h", "grid_w",
    "bank_size", "classes", "heads", "content", "fusion", "precision",
    "task", "noise", "train_samples", "test_samples", "epochs", "batch_size",
    "lr", "probe_steps", "probe_lr", "seed", "out_dir", "data_cache",
)


def _resolve(args):
    overrides = {k: getattr(args, k, None) for k in _RUN_FIELDS}
    return cfg_mod.resolve(getattr(args, "config", None), overrides)


def _load_data(rc):
    spec = rc.task_spec()
    if rc.data_cache:
        path = Path(rc.data_cache)
        if path.exists():
            cached = sd.load_cache(path, spec)
            if cached is not None:
                log.info("loaded dataset cache %s", path)
                return cached
            log.info("dataset cache %s is stale, regenerating", path)
        train, test = sd.generate(spec)
        sd.save_cache(path, spec, train, test)
        return train, test
    return sd.generate(spec)


def _fmt(x):
    return f"{x:.10g}"


def _metrics_csv(rows, n_classes):
    header = "step,split,loss,acc," + ",".join(
        f"acc_class_{c}" for c in range(n_classes)
    )
    lines = [header]
    for step, split, m in rows:
        cells = [str(step), split, _fmt(m["loss"]), _fmt(m["acc"])]
        cells += [_fmt(v) for v in m["per_class"]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def _dataset_hash(train, test):
    h = hashlib.blake2b(digest_size=8)
    for batch in (train, test):
        for m in batch.modalities:
            h.update(np.ascontiguousarray(m).tobytes())
        h.update(np.ascontiguousarray(batch.labels).tobytes())
    return h.hexdigest()


# -- train -------------------------------------------------------------------


def _train_run(rc, train_data, test_data, out_dir=None):
    """Train one model; returns (model, metric rows, aborted flag)."""
    model = net.MMixer(rc.model_config())
    opt = net.make_optimizer(model, lr=rc.lr)
    rows = [(0, "test", net.evaluate(model, test_data))]
    best = -1.0
    aborted = False
    for epoch in range(1, rc.epochs + 1):
        try:
            tm = net.train_epoch(model, train_data, opt,
                                 batch_size=rc.batch_size, epoch=epoch)
        except NumericError as e:
            log.error("aborting: %s (last-good checkpoint retained)", e)
            aborted = True
            break
        em = net.evaluate(model, test_data)
        rows.append((epoch, "train", tm))
        rows.append((epoch, "test", em))
        if out_dir is not None and em["acc"] > best:
            best = em["acc"]
            model.save(out_dir / "best.mmx", opt)
    if not aborted and rc.probe_steps > 0:
        net.fit_stream_probes(model, train_data, steps=rc.probe_steps,
                              lr=rc.probe_lr)
    return model, rows, aborted


def cmd_train(args):
    rc = _resolve(args)
    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(cfg_mod.emit(rc))
    train_data, test_data = _load_data(rc)
    model, rows, aborted = _train_run(rc, train_data, test_data, out_dir)
    (out_dir / "metrics.csv").write_bytes(
        _metrics_csv(rows, rc.classes).encode()
    )
    if aborted:
        return EXIT_CHECK
    model.save(out_dir / "final.mmx")
    final_test = rows[-1][2] if rows[-1][1] == "test" else rows[0][2]
    print(f"final test accuracy: {_fmt(final_test['acc'])}")
    log.info("wrote %s and %s", out_dir / "metrics.csv", out_dir / "final.mmx")
    return EXIT_OK


# -- eval --------------------------------------------------------------------


def cmd_eval(args):
    rc = _resolve(args)
    path = Path(args.checkpoint)
    if not path.exists():
        print(f"checkpoint not found: {path}", file=sys.stderr)
        return EXIT_USAGE
    model = net.MMixer(rc.model_config())
    model.load(path)
    _, test_data = _load_data(rc)
    m = net.evaluate(model, test_data)
    print(f"loss: {_fmt(m['loss'])}")
    print(f"top1: {_fmt(m['acc'])}")
    for c, v in enumerate(m["per_class"]):
        print(f"acc_class_{c}: {_fmt(v)}")
    for i, acc in enumerate(net.stream_probe_accuracy(model, test_data)):
        print(f"stream_{i}_probe_acc: {_fmt(acc)}")
    if args.out:
        Path(args.out).write_bytes(
            _metrics_csv([(0, "test", m)], rc.classes).encode()
        )
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------


def gradcheck_model_config(seed=0):
    """Toy geometry, forced 64-bit, every subsystem enabled."""
    return ModelConfig(
        n_modalities=2, seq_len=10, feat_channels=4, hidden_dim=8,
        grid_h=2, grid_w=2, bank_size=3, n_classes=3, heads=2,
        content_mode="cfem", fusion_mode="bank", precision="float64",
        seed=seed,
    )


def run_gradcheck(seed=0, samples=None, step=1e-4, batch=2):
    """Check every parameter tensor against central differences.

    Trunk parameters are checked under the classification loss, probe
    weights under the per-stream loss. Returns (rows, elapsed).
    """
    cfg = gradcheck_model_config(seed)
    model = net.MMixer(cfg)
    rng = make_rng(derive_seed(seed, "gradcheck-batch"))
    inputs = [
        Tensor(rng.normal(size=(batch, cfg.feat_channels, cfg.seq_len,
                                cfg.grid_h, cfg.grid_w)))
        for _ in range(cfg.n_modalities)
    ]
    labels = rng.integers(0, cfg.n_classes, size=batch)

    def trunk_loss():
        return model.loss(model.forward(inputs), labels)

    def probe_loss():
        total, _ = model.per_stream_heads(model.forward(inputs), labels)
        return total

    trunk = model.named_parameters(include_probes=False)
    probes = [(p.name, p) for p in model.probes]
    rows, t1 = gc_mod.check_model_gradients(trunk_loss, trunk, step=step,
                                            samples=samples, seed=seed)
    prows, t2 = gc_mod.check_model_gradients(probe_loss, probes, step=step,
                                             samples=samples, seed=seed)
    return rows + prows, t1 + t2


def cmd_gradcheck(args):
    rows, elapsed = run_gradcheck(seed=args.seed, samples=args.samples)
    worst = 0.0
    for name, err, n in gc_mod.group_report(rows):
        status = "PASS" if err <= GRADCHECK_TOLERANCE else "FAIL"
        print(f"{status}  {name:<12} max_rel_err={err:.3e}  ({n} elements)")
        worst = max(worst, err)
    print(f"checked {sum(n for _, _, n in rows)} elements in {elapsed:.1f}s; "
          f"worst {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if worst <= GRADCHECK_TOLERANCE else EXIT_CHECK


# -- ablate --------------------------------------------------------------------


def run_ablation(rc, seeds):
    """Train every content x fusion cell on shared per-seed datasets.

    Returns table rows: (content, fusion, mean test acc, per-stream mean
    probe accs, dataset hash).
    """
    datasets = {}
    for seed in seeds:
        datasets[seed] = sd.generate(replace(rc.task_spec(), seed=seed))
    data_hash = "+".join(_dataset_hash(*datasets[s])[:8] for s in seeds)
    rows = []
    for content in ABLATION_CONTENTS:
        for fusion in ABLATION_FUSIONS:
            accs, probe_accs = [], []
            for seed in seeds:
                cell = replace(rc, content=content, fusion=fusion, seed=seed)
                train_data, test_data = datasets[seed]
                model, _, aborted = _train_run(cell, train_data, test_data)
                if aborted:
                    raise NumericError(
                        f"non-finite loss in cell {content}/{fusion} seed {seed}"
                    )
                m = net.evaluate(model, test_data)
                accs.append(m["acc"])
                probe_accs.append(net.stream_probe_accuracy(model, test_data))
                log.info("cell %s/%s seed %d: acc=%.4f probes=%s",
                         content, fusion, seed, m["acc"],
                         [f"{a:.3f}" for a in probe_accs[-1]])
            rows.append((content, fusion, float(np.mean(accs)),
                         np.mean(probe_accs, axis=0).tolist(), data_hash))
    return rows


def format_ablation_table(rows, n_modalities):
    header = ["content", "fusion", "test_acc"]
    header += [f"probe_acc_{i}" for i in range(n_modalities)]
    header += ["split_hash"]
    lines = [",".join(header)]
    for content, fusion, acc, probes, data_hash in rows:
        cells = [content, fusion, _fmt(acc)]
        cells += [_fmt(p) for p in probes]
        cells.append(data_hash)
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def cmd_ablate(args):
    rc = _resolve(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise ConfigError("--seeds must name at least one seed")
    out_dir = Path(rc.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(rc, seeds)
    table = format_ablation_table(rows, rc.modalities)
    (out_dir / "ablation.csv").write_bytes(table.encode())
    print(table, end="")
    return EXIT_OK


# -- gen-data ------------------------------------------------------------------


def cmd_gen_data(args):
    rc = _resolve(args)
    spec = rc.task_spec()
    train, test = sd.generate(spec)
    out = Path(args.out)
    sd.save_cache(out, spec, train, test)
    print(f"wrote {out} ({len(train)} train / {len(test)} test, "
          f"hash {sd.spec_hash(spec).hex()[:16]})")
    return EXIT_OK


# -- entry point ----------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmixer",
        description="Train and probe the multi-modal fusion classifier on "
                    "synthetic complementary-modality tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model, write metrics + checkpoints")
    _add_run_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_run_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="optional metrics CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck",
                       help="compare autodiff grads with finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=None,
                   help="elements to probe per tensor (default: all)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the content x fusion grid")
    _add_run_flags(p)
    p.add_argument("--seeds", default="1,2,3",
                   help="comma-separated seeds shared across cells")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gen-data", help="write a dataset cache file")
    _add_run_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    return parser


def main(argv=None):
    logging.basicConfig(level=logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as e:
        print(f"checkpoint error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_CHECK
    except OSError as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
