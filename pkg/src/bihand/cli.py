"""Command-line interface: verification, training, benchmarking, evaluation.

Exit codes: 0 success, 1 contract or tolerance failure, 2 bad invocation.
All file outputs are deterministic for a fixed seed.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import handmodel, ssm, train as tr
from .gradcheck import fd_check
from .nn import (Conv2dLayer, LayerNormLayer, MlpLayer, NonLocalBlock,
                 grid_sample, softmax)
from .pipeline import (BimanualHandNet, PipelineConfig, load_checkpoint,
                       load_config_json, save_checkpoint, soft_argmax)
from .tensor import Tensor, elementwise, reduce, set_gradient_corruption

OP_TOLERANCE = 1e-6
END_TO_END_TOLERANCE = 1e-5


# -- gradient-check registry -------------------------------------------------

def _check_matmul():
    rng = np.random.default_rng(11)
    x = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    w = Tensor(rng.uniform(-2, 2, (4, 2)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (3, 2)))
    return fd_check(lambda: ((x @ w) * probe).sum(), [x, w])


def _check_elementwise():
    rng = np.random.default_rng(13)
    a = Tensor(rng.uniform(0.2, 2, (3, 4)), requires_grad=True)
    b = Tensor(rng.uniform(0.2, 2, (3, 4)), requires_grad=True)

    def run():
        h = elementwise("mul", elementwise("silu", a), elementwise("softplus", b))
        h = elementwise("add", h, elementwise("log", b))
        return elementwise("sub", h, elementwise("exp", a * 0.3)).sum()

    return fd_check(run, [a, b])


def _check_reduce():
    rng = np.random.default_rng(17)
    x = Tensor(rng.uniform(-2, 2, (3, 5)), requires_grad=True)
    w = Tensor(rng.uniform(-1, 1, 3))

    def run():
        return (reduce("mean", x, 1) * w).sum() + (reduce("max", x, 1) * w).sum() \
            + reduce("sum", x).sum() * 0.1

    return fd_check(run, [x])


def _check_conv2d():
    rng = np.random.default_rng(19)
    layer = Conv2dLayer(2, 3, 3, stride=2, padding=1, rng=rng)
    x = Tensor(rng.uniform(-2, 2, (2, 5, 5)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (3, 3, 3)))
    return fd_check(lambda: (layer(x) * probe).sum(),
                    [x, layer.weight, layer.bias])


def _check_layernorm():
    rng = np.random.default_rng(23)
    layer = LayerNormLayer(6)
    x = Tensor(rng.uniform(-2, 2, (3, 6)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (3, 6)))
    return fd_check(lambda: (layer(x) * probe).sum(), [x, layer.gamma, layer.beta])


def _check_softmax():
    rng = np.random.default_rng(29)
    x = Tensor(rng.uniform(-3, 3, (3, 5)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (3, 5)))
    return fd_check(lambda: (softmax(x, axis=1) * probe).sum(), [x])


def _check_grid_sample():
    rng = np.random.default_rng(31)
    f = Tensor(rng.uniform(-2, 2, (2, 5, 6)), requires_grad=True)
    pts = Tensor(np.stack([rng.uniform(0.3, 4.2, 5), rng.uniform(0.3, 3.2, 5)],
                          axis=1) + 0.13, requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (5, 2)))
    return fd_check(lambda: (grid_sample(f, pts) * probe).sum(), [f, pts])


def _check_non_local():
    rng = np.random.default_rng(37)
    block = NonLocalBlock(3, rng, zero_init_out=False)
    block.z.weight.data[:] = rng.uniform(-0.5, 0.5, block.z.weight.shape)
    x = Tensor(rng.uniform(-1, 1, (3, 2, 2)), requires_grad=True)
    ctx = Tensor(rng.uniform(-1, 1, (3, 2, 2)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (3, 2, 2)))
    leaves = [x, ctx] + [t for _, t in block.params()]
    return fd_check(lambda: (block(x, ctx) * probe).sum(), leaves)


def _check_mlp():
    rng = np.random.default_rng(41)
    layer = MlpLayer(4, ratio=2, rng=rng)
    x = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (3, 4)))
    return fd_check(lambda: (layer(x) * probe).sum(),
                    [x] + [t for _, t in layer.params()])


def _check_selective_scan():
    rng = np.random.default_rng(43)
    seq, ch, state = 5, 2, 3
    delta = Tensor(rng.uniform(0.02, 0.3, (seq, ch)), requires_grad=True)
    a = Tensor(-rng.uniform(0.5, 3.0, (ch, state)), requires_grad=True)
    b = Tensor(rng.uniform(-1, 1, (seq, state)), requires_grad=True)
    c = Tensor(rng.uniform(-1, 1, (seq, state)), requires_grad=True)
    d = Tensor(rng.uniform(-1, 1, ch), requires_grad=True)
    x = Tensor(rng.uniform(-1, 1, (seq, ch)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (seq, ch)))

    def run():
        coeffs = ssm.ScanCoeffs(delta, a, b, c, d)
        return (ssm.selective_scan(coeffs, x) * probe).sum()

    return fd_check(run, [x, delta, a, b, c, d])


def _check_vmblock():
    rng = np.random.default_rng(47)
    block = ssm.VmBlockLayer(6, state_dim=3, conv_width=3, rng=np.random.default_rng(2))
    block.out_proj.weight.data[:] = rng.normal(0, 0.2, block.out_proj.weight.shape)
    block.mlp.fc2.weight.data[:] = rng.normal(0, 0.2, block.mlp.fc2.weight.shape)
    x = Tensor(rng.uniform(-1, 1, (4, 6)), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (4, 6)))
    leaves = [x] + [t for _, t in block.params()]
    return fd_check(lambda: (block(x) * probe).sum(), leaves,
                    max_coords_per_leaf=8, rng=rng)


def _check_soft_argmax():
    rng = np.random.default_rng(53)
    logits = Tensor(rng.uniform(-2, 2, (3, 6)), requires_grad=True)
    pos = np.linspace(0.0, 5.0, 6)
    probe = Tensor(rng.uniform(-1, 1, 3))
    return fd_check(lambda: (soft_argmax(logits, pos) * probe).sum(), [logits])


def _check_rodrigues():
    rng = np.random.default_rng(59)
    worst = 0.0
    probe = Tensor(rng.uniform(-1, 1, (3, 3)))
    for scale in (1.2, 1e-3, 5e-9):
        aa = Tensor(rng.uniform(-1, 1, 3) * scale, requires_grad=True)
        worst = max(worst, fd_check(
            lambda: (handmodel.rodrigues(aa) * probe).sum(), [aa]))
    return worst


def _check_lbs():
    rng = np.random.default_rng(61)
    rig = handmodel.make_default_rig(seed=0)
    theta = Tensor(rng.normal(0, 0.3, (16, 3)), requires_grad=True)
    beta = Tensor(rng.normal(0, 1, 10), requires_grad=True)
    probe = Tensor(rng.uniform(-1, 1, (rig.num_vertices, 3)) * 0.02)
    return fd_check(lambda: (handmodel.lbs(rig, theta, beta).vertices * probe).sum(),
                    [theta, beta], max_coords_per_leaf=16, rng=rng)


def _check_loss():
    rng = np.random.default_rng(67)
    cfg = PipelineConfig.toy(seed=1)
    net = BimanualHandNet(cfg)
    sample = tr.synth_dataset(cfg, net.rig, 1, seed=4)[0]
    out = net.forward(Tensor(sample.image))
    preds = {
        "theta_l": Tensor(rng.normal(0, 0.3, (16, 3)), requires_grad=True),
        "beta_l": Tensor(rng.normal(0, 1, 10), requires_grad=True),
        "t_rel": Tensor(rng.uniform(-20, 20, 3), requires_grad=True),
        "vertices_l": Tensor(rng.normal(0, 20, (cfg.vertices, 3)), requires_grad=True),
    }

    def run():
        for name, t in preds.items():
            setattr(out, name, t)
        return tr.loss(out, sample) * 0.05

    return fd_check(run, list(preds.values()), max_coords_per_leaf=12, rng=rng)


def _check_end_to_end():
    cfg = PipelineConfig.toy(seed=2)
    net = BimanualHandNet(cfg)
    rng = np.random.default_rng(71)
    for _, t in net.params():
        if np.all(t.data == 0.0):
            t.data[:] = rng.normal(0, 0.1, t.data.shape)
    img = Tensor(rng.uniform(0, 1, (3, 64, 64)))
    scales = {"theta_l": 1.0, "theta_r": 1.0, "beta_l": 0.1, "beta_r": 0.1,
              "joints_uvd_l": 0.05, "joints_uvd_r": 0.05,
              "vertices_l": 0.005, "vertices_r": 0.005, "t_rel": 0.03}
    probes = {}

    def run():
        out = net.forward(img)
        if not probes:
            for name, s in scales.items():
                probes[name] = Tensor(rng.uniform(-1, 1, getattr(out, name).shape) * s)
        total = None
        for name, p in probes.items():
            term = (getattr(out, name) * p).mean()
            total = term if total is None else total + term
        return total

    leaves = [t for _, t in net.params()]
    return fd_check(run, leaves, max_coords_per_leaf=2, rng=rng)


GRADCHECK_REGISTRY = [
    ("matmul", _check_matmul, OP_TOLERANCE),
    ("elementwise", _check_elementwise, OP_TOLERANCE),
    ("reduce", _check_reduce, OP_TOLERANCE),
    ("conv2d", _check_conv2d, OP_TOLERANCE),
    ("layernorm", _check_layernorm, OP_TOLERANCE),
    ("softmax", _check_softmax, OP_TOLERANCE),
    ("grid_sample", _check_grid_sample, OP_TOLERANCE),
    ("non_local", _check_non_local, OP_TOLERANCE),
    ("mlp", _check_mlp, OP_TOLERANCE),
    ("selective_scan", _check_selective_scan, OP_TOLERANCE),
    ("vmblock", _check_vmblock, OP_TOLERANCE),
    ("soft_argmax", _check_soft_argmax, OP_TOLERANCE),
    ("rodrigues", _check_rodrigues, OP_TOLERANCE),
    ("lbs", _check_lbs, OP_TOLERANCE),
    ("loss", _check_loss, OP_TOLERANCE),
    ("end_to_end", _check_end_to_end, END_TO_END_TOLERANCE),
]


def run_gradcheck(corrupt=None, stream=None):
    """Run every registered check once; returns (all_passed, report rows)."""
    stream = stream or sys.stdout
    if corrupt:
        set_gradient_corruption(corrupt)
    rows = []
    try:
        for name, check, tol in GRADCHECK_REGISTRY:
            err = check()
            ok = err <= tol
            rows.append((name, err, tol, ok))
            print(f"{name:16s} max_rel_err={err:.3e}  tol={tol:.0e}  "
                  f"{'ok' if ok else 'FAIL'}", file=stream)
    finally:
        set_gradient_corruption(None)
    return all(r[3] for r in rows), rows


# -- dataset container ----------------------------------------------------------

_SAMPLE_FIELDS = ("image", "gt_theta_l", "gt_theta_r", "gt_beta_l", "gt_beta_r",
                  "gt_joints_l", "gt_joints_r", "gt_joints_uvd_l", "gt_joints_uvd_r",
                  "gt_vertices_l", "gt_vertices_r", "gt_t_rel")


def save_dataset(path, samples):
    records = [("meta/count", Tensor(np.array(float(len(samples)))))]
    for i, s in enumerate(samples):
        for fname in _SAMPLE_FIELDS:
            records.append((f"s{i:05d}/{fname}", Tensor(getattr(s, fname))))
    save_checkpoint(path, records)


def load_dataset(path):
    records = dict(load_checkpoint(path))
    if "meta/count" not in records:
        raise ValueError("dataset file is missing its sample count record")
    n = int(records["meta/count"])
    samples = []
    for i in range(n):
        kwargs = {}
        for fname in _SAMPLE_FIELDS:
            key = f"s{i:05d}/{fname}"
            if key not in records:
                raise ValueError(f"dataset file is missing record {key!r}")
            kwargs[fname] = records[key]
        samples.append(tr.TrainingSample(**kwargs))
    return samples


# -- commands ---------------------------------------------------------------------

def _load_config(args):
    if args.config:
        cfg = load_config_json(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        return cfg
    return PipelineConfig.toy(seed=args.seed if args.seed is not None else 0)


def cmd_gradcheck(args):
    ok, _ = run_gradcheck(corrupt=args.corrupt)
    if not ok:
        print("gradient check FAILED", file=sys.stderr)
        return 1
    print("gradient check passed")
    return 0


def cmd_train_toy(args):
    cfg = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = BimanualHandNet(cfg)
    data = tr.synth_dataset(cfg, net.rig, args.samples, seed=cfg.seed)
    result = tr.train_loop(net, data, epochs=args.epochs, batch_size=args.batch_size,
                           lr=args.lr, schedule=args.schedule)
    tr.write_trace_csv(out_dir / "loss_trace.csv", result.trace)
    net.save_checkpoint(out_dir / "model.ckpt")
    save_dataset(out_dir / "dataset.bin", data)
    metrics = tr.evaluate(net, data)
    tr.write_metrics_csv(out_dir / "metrics.csv", "train", metrics)
    ratio = result.final_loss / result.initial_loss
    print(f"steps={len(result.trace)} initial_loss={result.initial_loss:.4f} "
          f"final_loss={result.final_loss:.4f} ratio={ratio:.4f}")
    print(f"mpjpe_all={metrics['mpjpe_all']:.3f}mm mpvpe_all={metrics['mpvpe_all']:.3f}mm")
    return 0


def cmd_eval(args):
    cfg = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = BimanualHandNet(cfg)
    net.load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    metrics = tr.evaluate(net, data)
    tr.write_metrics_csv(out_dir / "metrics.csv", args.split, metrics)
    print(",".join(tr.METRICS_HEADER))
    print(",".join([args.split] + [f"{metrics[k]:.6f}" for k in tr.METRICS_HEADER[1:]]))
    return 0


def cmd_gen_data(args):
    cfg = _load_config(args)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rig = handmodel.make_default_rig(cfg.seed, cfg.vertices)
    data = tr.synth_dataset(cfg, rig, args.samples, seed=cfg.seed, noise=args.noise)
    path = out_dir / "dataset.bin"
    save_dataset(path, data)
    print(f"wrote {len(data)} samples to {path}")
    return 0


def cmd_rig_export(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else 0
    rig = handmodel.make_default_rig(seed)
    path = out_dir / "rig.json"
    handmodel.save_rig_json(rig, path)
    handmodel.load_rig_json(path)  # revalidate what we wrote
    print(f"wrote rig ({rig.num_vertices} vertices, {len(rig.faces)} faces) to {path}")
    return 0


def cmd_bench_scan(args):
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lengths = [int(s) for s in args.seq_lengths.split(",") if s]
    if not lengths or any(v < 1 for v in lengths):
        raise ValueError(f"sequence lengths must be positive, got {args.seq_lengths!r}")
    ch, state = 4, 8
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    rows = []
    for seq in lengths:
        delta = rng.uniform(0.02, 0.2, (seq, ch))
        a = -rng.uniform(0.5, 3.0, (ch, state))
        b = rng.uniform(-1, 1, (seq, state))
        c = rng.uniform(-1, 1, (seq, state))
        d = rng.uniform(-1, 1, ch)
        x = rng.uniform(-1, 1, (seq, ch))
        coeffs = ssm.ScanCoeffs(Tensor(delta), Tensor(a), Tensor(b), Tensor(c), Tensor(d))
        t0 = time.perf_counter()
        y_scan = ssm.selective_scan(coeffs, Tensor(x))
        scan_s = time.perf_counter() - t0
        if seq <= args.dense_cap:
            t0 = time.perf_counter()
            y_dense = ssm.dense_scan_reference(delta, a, b, c, d, x)
            dense_s = time.perf_counter() - t0
            gap = float(np.max(np.abs(y_scan.data - y_dense)))
        else:
            dense_s, gap = float("nan"), float("nan")
        rows.append((seq, ssm.scan_flops(seq, ch, state),
                     ssm.dense_scan_flops(seq, ch, state), scan_s, dense_s, gap))
    path = out_dir / "bench_scan.csv"
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("seq,scan_flops,dense_flops,scan_seconds,dense_seconds,max_abs_gap\n")
        for row in rows:
            fh.write(",".join(str(v) for v in row) + "\n")
    for row in rows:
        print(f"seq={row[0]:6d} scan_flops={row[1]:>12d} dense_flops={row[2]:>14d} "
              f"scan={row[3]:.4f}s dense={row[4]:.4f}s")
    print(f"wrote {path}")
    return 0


def cmd_count(args):
    ref = tr.REFERENCE_FULL_SCALE
    rows = [("toy", PipelineConfig.toy()), ("full", PipelineConfig.full())]
    if args.config:
        rows.insert(0, ("configured", _load_config(args)))
    for label, c in rows:
        params, flops = tr.count_params_flops(c)
        line = (f"{label:10s} params={params / 1e6:8.2f}M  "
                f"gflops={flops / 1e9:8.2f}")
        if label == "full":
            dp = 100.0 * (params / 1e6 - ref["params_m"]) / ref["params_m"]
            df = 100.0 * (flops / 1e9 - ref["gflops"]) / ref["gflops"]
            line += (f"  published_reference={ref['params_m']}M/{ref['gflops']}GF "
                     f"deviation={dp:+.1f}%/{df:+.1f}% (informative; stack depths "
                     f"and widths are not published)")
        print(line)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bihand",
        description="Two-hand reconstruction: verification, training, evaluation.")
    parser.add_argument("--config", default=None, help="pipeline config JSON")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--out", default="out", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all ops")
    p.add_argument("--corrupt", default=None,
                   help="test hook: corrupt the gradient rule of one op tag")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("train-toy", help="overfit the toy profile on synthetic data")
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--schedule", choices=("none", "step"), default="none")
    p.set_defaults(fn=cmd_train_toy)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("rig-export", help="write the procedural rig as JSON")
    p.set_defaults(fn=cmd_rig_export)

    p = sub.add_parser("bench-scan", help="scan vs dense-operator cost comparison")
    p.add_argument("--seq-lengths", default="256,512,1024,2048")
    p.add_argument("--dense-cap", type=int, default=2048,
                   help="skip dense timing above this length (memory)")
    p.set_defaults(fn=cmd_bench_scan)

    p = sub.add_parser("count", help="parameter and FLOP accounting")
    p.set_defaults(fn=cmd_count)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        cfg_probe = args.config
        if cfg_probe and not Path(cfg_probe).exists():
            print(f"config file not found: {cfg_probe}", file=sys.stderr)
            return 2
    except Exception:
        return 2
    try:
        return args.fn(args)
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
