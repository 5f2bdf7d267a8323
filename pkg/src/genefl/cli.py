"""Command-line entry points: run experiments, inspect genes, attack checkpoints."""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .genecraft import load_gene
from .harness import MODES, ExperimentConfig, comm_cost, run_experiment
from .privacy import idlg_reconstruct, observe_gradients, psnr


def _cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    overrides = {}
    if args.mode is not None:
        overrides["mode"] = args.mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
        cfg.validate()
    world = run_experiment(cfg, args.out)
    measured, formula_bits = comm_cost(
        world.ledger,
        cfg.rounds_known + cfg.rounds_agnostic,
        cfg.bitwidth,
        world.arch.param_count,
    )
    final = world.metrics[-1]
    print(f"mode={cfg.mode} seed={cfg.seed} rounds={final.round}")
    print(f"final mean test accuracy: {final.mean_test_accuracy:.4f}")
    print(f"measured uplink: {measured} bytes")
    print(f"headline formula (R*B*|W|*2): {formula_bits} bits")
    print(f"reports in {args.out}")
    return 0


def _cmd_inspect_gene(args) -> int:
    gene = load_gene(args.checkpoint)
    print(f"gene: gamma={gene.gamma} params={gene.param_count} "
          f"bytes={gene.param_count * 4} origin={gene.origin}")
    print(f"{'layer_id':<16}{'kept':<6}{'shape':<14}params")
    for lid, bit in gene.layer_mask.items():
        if bit:
            t = gene.tensors[lid]
            print(f"{lid:<16}{'yes':<6}{str(t.shape):<14}{t.size}")
        else:
            print(f"{lid:<16}{'no':<6}{'-':<14}-")
    return 0


def _cmd_attack(args) -> int:
    from .harness import dataset_for_config

    model, _ = checkpoint.load_params(args.checkpoint)
    cfg = ExperimentConfig.from_json(args.config)
    dataset = dataset_for_config(cfg)
    if not 0 <= args.image_index < len(dataset):
        raise SystemExit(f"--image-index must be in [0, {len(dataset)})")
    x = dataset.inputs[args.image_index].astype(np.float64)
    label = int(dataset.labels[args.image_index])

    layers = None
    if args.gene:
        layers = load_gene(args.gene).layer_ids
    obs = observe_gradients(model, x, label, layers=layers)
    state = idlg_reconstruct(obs, steps=args.steps, seed=args.seed, step_size=args.step_size)
    score = psnr(x, state.recon)
    surface = "all layers" if layers is None else ",".join(layers)
    print(f"observed: {surface}")
    print(f"matching objective: {state.final_loss:.6e}")
    print(f"psnr: {score:.2f} dB")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .params import LayeredParams

    checkpoint.save_params(
        out / "reconstruction.ckpt",
        LayeredParams([("input", state.recon.astype(np.float32))]),
        meta={
            "kind": "reconstruction",
            "image_index": args.image_index,
            "true_label": label,
            "psnr_db": score,
            "final_loss": state.final_loss,
            "observed_layers": list(obs.observed_layers),
        },
    )
    with open(out / "attack_trace.csv", "w", encoding="utf-8", newline="\n") as f:
        f.write("step,matching_loss\n")
        for i, value in enumerate(state.loss_trace):
            f.write(f"{i},{value!r}\n")
    print(f"artifacts in {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="genefl",
        description="Desk-scale gene-driven federated learning simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a full experiment from a JSON config")
    p_run.add_argument("--config", required=True, help="JSON config path")
    p_run.add_argument("--mode", choices=MODES, default=None, help="override exchange mode")
    p_run.add_argument("--seed", type=int, default=None, help="override master seed")
    p_run.add_argument("--out", default="out", help="report directory (default: out)")
    p_run.set_defaults(func=_cmd_run)

    p_gene = sub.add_parser("inspect-gene", help="describe a gene checkpoint")
    p_gene.add_argument("--checkpoint", required=True, help="gene container path")
    p_gene.set_defaults(func=_cmd_inspect_gene)

    p_attack = sub.add_parser("attack", help="gradient-inversion probe on a checkpoint")
    p_attack.add_argument("--checkpoint", required=True, help="model container path")
    p_attack.add_argument("--image-index", type=int, required=True, help="victim sample index")
    p_attack.add_argument("--config", required=True, help="config (echo) to rebuild the data")
    p_attack.add_argument("--gene", default=None, help="restrict observation to this gene's layers")
    p_attack.add_argument("--steps", type=int, default=300)
    p_attack.add_argument("--step-size", type=float, default=0.1)
    p_attack.add_argument("--seed", type=int, default=0)
    p_attack.add_argument("--out", default="attack_out", help="artifact directory")
    p_attack.set_defaults(func=_cmd_attack)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
