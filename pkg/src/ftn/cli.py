"""Command-line interface: ``ftn <subcommand> ...``.

FLOP figures use the 1 MAC = 1 FLOP convention; layer norm, softmax, GELU
and bilinear upsampling are not counted.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint
from .analysis import PUBLISHED_BUDGETS, count_params, derive_variants, estimate_flops
from .data import make_batch
from .decoder import FPTConfig, predict_labels
from .encoder import variant
from .errors import FTNError
from .gradcheck import check_parameters
from .images import read_ppm, write_pgm
from .model import FTNConfig, FTNModel, loss, micro_ftn_config, variant_ftn_config
from .tensor import Tensor, no_grad
from .tensorfile import load_tensor, save_tensor
from .train import TOY_SEED, ToyTrainingConfig, evaluate_miou, train_toy

FLOP_NOTE = ("GFLOPs count multiply-accumulates (1 MAC = 1 FLOP); layer norm, softmax, "
             "GELU and bilinear upsampling are excluded.")
GRADCHECK_TOLERANCE = 1e-3


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def cmd_describe(args) -> int:
    cfg = variant(args.variant)
    h, w = args.size
    print(f"{cfg.name}  C1={cfg.embed_dim}  head_dim={cfg.head_dim}")
    print(f"input {h}x{w}")
    print("stage  P   C_i    N_i  G_i  H_i  E_i  tokens  grid        tokens/group")
    for i, (sh, sw, c) in enumerate(cfg.stage_shapes(h, w)):
        g = int(round(cfg.groups[i] ** 0.5))
        print(f"{i + 1:>5}  {cfg.patch_sizes[i]:<2}  {c:<5}  {cfg.depths[i]:<3}  {cfg.groups[i]:<3}  "
              f"{cfg.heads[i]:<3}  {cfg.mlp_ratios[i]:<3}  {sh * sw:<6}  {sh}x{sw:<8}  "
              f"{(sh // g) * (sw // g)}")
    if args.save_config:
        full = variant_ftn_config(args.variant, num_classes=args.num_classes)
        Path(args.save_config).write_text(full.to_json() + "\n")
        print(f"wrote {args.save_config}")
    return 0


def _decoder_for(enc, num_classes):
    return FPTConfig(in_dims=enc.dims, num_classes=num_classes)


def cmd_params(args) -> int:
    enc = variant(args.variant)
    dec = None
    if args.with_decoder:
        enc = replace(enc, num_classes=0)
        dec = _decoder_for(enc, args.num_classes)
    rep = count_params(enc, dec)
    if dec is None:
        print(f"{enc.name} encoder parameters: {rep.total_params} ({rep.total_params / 1e6:.2f}M)")
        print(f"published budget: {PUBLISHED_BUDGETS[enc.name[-1]][0] / 1e6:.0f}M")
    else:
        print(f"FTN({enc.name}) parameters")
        for group in ("encoder", "decoder", "aux"):
            n = rep.params(group)
            print(f"  {group:<8} {n:>11} ({n / 1e6:.2f}M)")
        n = rep.params("encoder", "decoder")
        print(f"  {'infer':<8} {n:>11} ({n / 1e6:.2f}M)")
    if args.csv:
        _write_csv(args.csv, ["group", "layer", "params", "macs"], rep.to_rows())
    return 0


def cmd_flops(args) -> int:
    enc = variant(args.variant)
    dec = None
    if args.with_decoder:
        enc = replace(enc, num_classes=0)
        dec = _decoder_for(enc, args.num_classes)
    rep = estimate_flops(enc, tuple(args.size), dec)
    h, w = args.size
    print(f"{enc.name} at {h}x{w}")
    for group in ("encoder", "decoder", "aux"):
        if rep.select(group):
            print(f"  {group:<8} {rep.macs(group) / 1e9:.3f} GFLOPs")
    print(f"  {'total':<8} {rep.gflops:.3f} GFLOPs")
    print(FLOP_NOTE)
    if args.csv:
        _write_csv(args.csv, ["group", "layer", "params", "macs"], rep.to_rows())
        if not args.no_plot:
            from .plotting import plot_stage_costs
            png = Path(args.csv).with_suffix(".png")
            plot_stage_costs(rep, png, f"{enc.name} @ {h}x{w}")
    return 0


def _load_model(config_path=None, checkpoint_path=None) -> FTNModel:
    if checkpoint_path:
        return checkpoint.load(checkpoint_path)
    return FTNModel(FTNConfig.from_json(Path(config_path).read_text()))


def cmd_forward(args) -> int:
    model = _load_model(args.config, args.checkpoint)
    img = load_tensor(args.input)
    if img.ndim == 3:
        img = img[None]
    with no_grad():
        logits = model.logits(Tensor(img))
    save_tensor(args.output, logits.data)
    print(f"logits {tuple(logits.shape)} -> {args.output}")
    return 0


def cmd_segment(args) -> int:
    model = checkpoint.load(args.checkpoint)
    img = read_ppm(args.image)
    with no_grad():
        labels = predict_labels(model.logits(Tensor(img[None])))[0]
    write_pgm(args.out, labels)
    counts = np.bincount(labels.reshape(-1), minlength=model.config.decoder.num_classes)
    print(f"labels {labels.shape[0]}x{labels.shape[1]} -> {args.out}")
    print("pixels per class: " + " ".join(str(int(c)) for c in counts))
    return 0


def run_gradcheck(seed: int, samples: int = 200, size: int = 32):
    model = FTNModel(micro_ftn_config(seed=seed)).to_dtype(np.float64)
    model.train()
    images, labels = make_batch([seed, seed + 1], size=size)
    x = Tensor(images.astype(np.float64))

    def objective():
        out = model(x)
        return loss(out.logits, labels, out.aux_logits)

    return model, check_parameters(objective, list(model.named_parameters()), samples,
                                   np.random.default_rng(seed))


def cmd_gradcheck(args) -> int:
    model, rep = run_gradcheck(args.seed, args.samples)
    print(f"micro FTN: {model.num_parameters()} parameters, {rep.n_checked} coordinates "
          f"({rep.n_nonzero} with nonzero gradient), float64, h=1e-3")
    print(f"max relative error {rep.max_rel_error:.3e}")
    ok = rep.max_rel_error < GRADCHECK_TOLERANCE
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_train_toy(args) -> int:
    model = FTNModel(micro_ftn_config(seed=args.seed))
    cfg = ToyTrainingConfig(steps=args.steps, lr=args.lr, batch_size=args.batch_size)
    trace = train_toy(model, args.steps, args.lr, args.seed, cfg)
    trace.write_csv(args.out)
    miou = evaluate_miou(model, list(range(10 ** 6, 10 ** 6 + 64)))
    print(f"steps {args.steps}  initial loss {trace.losses[0]:.4f}  final loss {trace.losses[-1]:.4f}")
    print(f"toy mIoU {miou:.4f}")
    print(f"trace -> {args.out}")
    if not args.no_plot:
        from .plotting import plot_trace
        png = Path(args.out).with_suffix(".png")
        plot_trace(trace, png)
        print(f"figure -> {png}")
    if args.checkpoint:
        checkpoint.save(model, args.checkpoint)
        print(f"checkpoint -> {args.checkpoint}")
    return 0


def cmd_derive_variants(args) -> int:
    found = derive_variants()
    print("variant  C1   depths          params      GFLOPs  budget")
    for name, cfg in found.items():
        p = count_params(cfg).total_params
        f = estimate_flops(cfg).gflops
        bp, bf = PUBLISHED_BUDGETS[name]
        print(f"{name:<8} {cfg.embed_dim:<4} {str(cfg.depths):<15} {p / 1e6:8.2f}M  {f:6.2f}  "
              f"{bp / 1e6:.0f}M / {bf}")
    if args.out:
        Path(args.out).write_text(json.dumps({k: c.to_dict() for k, c in found.items()}, indent=2) + "\n")
        print(f"wrote {args.out}")
    mismatched = [k for k, c in found.items() if c != variant(k)]
    if mismatched:
        print(f"derived configs differ from the frozen variants: {', '.join(mismatched)}")
        return 1
    print("frozen variants match the derivation")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftn", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("describe", help="print a variant's configuration and stage shapes")
    d.add_argument("variant")
    d.add_argument("--size", nargs=2, type=int, default=(224, 224), metavar=("H", "W"))
    d.add_argument("--save-config", metavar="FILE", help="write the full FTN config as JSON")
    d.add_argument("--num-classes", type=int, default=60)
    d.set_defaults(func=cmd_describe)

    pa = sub.add_parser("params", help="analytic parameter count")
    pa.add_argument("variant")
    pa.add_argument("--with-decoder", action="store_true")
    pa.add_argument("--num-classes", type=int, default=60)
    pa.add_argument("--csv", metavar="FILE")
    pa.set_defaults(func=cmd_params)

    fl = sub.add_parser("flops", help="analytic GFLOPs; " + FLOP_NOTE)
    fl.add_argument("variant")
    fl.add_argument("--size", nargs=2, type=int, default=(224, 224), metavar=("H", "W"))
    fl.add_argument("--with-decoder", action="store_true")
    fl.add_argument("--num-classes", type=int, default=60)
    fl.add_argument("--csv", metavar="FILE", help="per-layer rows; a bar chart is written beside it")
    fl.add_argument("--no-plot", action="store_true")
    fl.set_defaults(func=cmd_flops)

    fw = sub.add_parser("forward", help="run the network on an FTNT tensor file")
    src = fw.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", metavar="FILE", help="FTN config JSON (seeded init)")
    src.add_argument("--checkpoint", metavar="FILE")
    fw.add_argument("--input", required=True)
    fw.add_argument("--output", required=True)
    fw.set_defaults(func=cmd_forward)

    sg = sub.add_parser("segment", help="label a PPM image with a checkpointed model")
    sg.add_argument("--checkpoint", required=True)
    sg.add_argument("--image", required=True)
    sg.add_argument("--out", required=True)
    sg.set_defaults(func=cmd_segment)

    gc = sub.add_parser("gradcheck", help="finite-difference check of the micro FTN")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--samples", type=int, default=200)
    gc.set_defaults(func=cmd_gradcheck)

    tt = sub.add_parser("train-toy", help="train the micro FTN on synthetic disks")
    tt.add_argument("--steps", type=int, default=300)
    tt.add_argument("--seed", type=int, default=TOY_SEED)
    tt.add_argument("--lr", type=float, default=1e-3)
    tt.add_argument("--batch-size", type=int, default=8)
    tt.add_argument("--out", required=True, help="trace CSV; the loss plot goes beside it")
    tt.add_argument("--checkpoint", metavar="FILE")
    tt.add_argument("--no-plot", action="store_true")
    tt.set_defaults(func=cmd_train_toy)

    dv = sub.add_parser("derive-variants", help="search T/S/B/L configs against the budgets")
    dv.add_argument("--out", metavar="FILE")
    dv.set_defaults(func=cmd_derive_variants)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FTNError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
