"""Command-line frontend: replayable experiments with machine-readable reports.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .analysis import DetectionConfig, detect_outliers, fingerprint, stats_csv
from .checkpoint import read_checkpoint, write_checkpoint
from .data import load_corpus, read_documents
from .encoder.model import EncoderConfig, EncoderParams, mini_schema
from .tokenizer import WordTokenizer
from .encoder.training import TrainConfig, export_trajectories_tsv, track_ln_trajectories, train, write_loss_csv
from .errors import LnprobeError, NumericError
from .harness import (
    BaselineSpec,
    EvalConfig,
    compare_plans,
    comparison_csv,
    embedding_heatmap,
    evaluate,
    evaluate_plan,
    heatmap_tsv,
    sweep_dims,
    sweep_tsv,
)
from .manifest import build_manifest, write_report
from .masking import MaskPlan, apply_mask, count_modified_weights, load_plan, plan_baseline, save_plan
from .schema import PRESETS, Role, load_schema


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except NumericError as exc:
            click.echo(f"numeric failure: {exc}", err=True)
            sys.exit(4)
        except (LnprobeError, OSError, ValueError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(3)
    return wrapper


def _parse_int_list(text: str | None) -> list[int] | None:
    """Accepts "3,7,42" and ranges "0-11" (inclusive), combinable."""
    if text is None:
        return None
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, _, hi = part.partition("-")
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return sorted(set(out))


def _resolve_schema(preset: str | None, schema_file: str | None):
    if schema_file:
        return load_schema(schema_file)
    if preset:
        if preset not in PRESETS:
            raise click.UsageError(f"unknown preset {preset!r}; options: {', '.join(sorted(PRESETS))}")
        return PRESETS[preset]
    raise click.UsageError("either --preset or --schema is required")


def _mini_params(checkpoint_path: str) -> EncoderParams:
    ckpt = read_checkpoint(checkpoint_path)
    return EncoderParams.from_checkpoint(ckpt)


schema_options = [
    click.option("--preset", default=None, help="Built-in schema preset name."),
    click.option("--schema", "schema_file", default=None, type=click.Path(exists=True),
                 help="Schema config file (overrides --preset)."),
]


def add_options(options):
    def wrap(fn):
        for opt in reversed(options):
            fn = opt(fn)
        return fn
    return wrap


@click.group()
@click.version_option(version=__version__)
@click.option("--timestamped", is_flag=True, default=False,
              help="Record a wall-clock timestamp in manifests (breaks byte-exact replay).")
@click.pass_context
def main(ctx, timestamped):
    """Forensics for LayerNorm outlier dimensions in Transformer checkpoints."""
    ctx.ensure_object(dict)
    ctx.obj["deterministic"] = not timestamped


@main.command("stats")
@click.argument("checkpoint_path", type=click.Path(exists=True))
@add_options(schema_options)
@click.option("--k-sigma", default=3.0, show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output CSV path.")
@click.pass_context
@handle_errors
def cmd_stats(ctx, checkpoint_path, preset, schema_file, k_sigma, out):
    """Per-layer LayerNorm statistics table (CSV)."""
    schema = _resolve_schema(preset, schema_file)
    ckpt = read_checkpoint(checkpoint_path)
    config = DetectionConfig(k_sigma=k_sigma,
                             layer_fraction=schema.detection_defaults.get("layer_fraction", 0.5))
    report = detect_outliers(ckpt, schema, config)
    stats_csv(report, out)
    manifest = build_manifest("stats", {"k_sigma": k_sigma}, {"checkpoint": checkpoint_path},
                              deterministic=ctx.obj["deterministic"])
    write_report({"outlier_dims": report.outlier_dims, "csv": str(out)}, manifest,
                 Path(out).with_suffix(".report.json"))
    click.echo(f"wrote {out}")


@main.command("detect")
@click.argument("checkpoint_path", type=click.Path(exists=True))
@add_options(schema_options)
@click.option("--k-sigma", default=None, type=float, help="Z-score threshold (preset default: 3).")
@click.option("--layer-fraction", default=None, type=float,
              help="Fraction of layers a dim must be flagged in (preset default: 0.5).")
@click.option("--require-both/--require-any", default=True, show_default=True,
              help="Require both gamma and beta to exceed the threshold.")
@click.option("--roles", default="output_ln_gamma,output_ln_beta", show_default=True)
@click.option("--out", required=True, type=click.Path(), help="Output report JSON path.")
@click.pass_context
@handle_errors
def cmd_detect(ctx, checkpoint_path, preset, schema_file, k_sigma, layer_fraction,
               require_both, roles, out):
    """Detect outlier dimensions and write an OutlierReport."""
    schema = _resolve_schema(preset, schema_file)
    defaults = schema.detection_defaults
    config = DetectionConfig(
        k_sigma=k_sigma if k_sigma is not None else defaults.get("k_sigma", 3.0),
        layer_fraction=(layer_fraction if layer_fraction is not None
                        else defaults.get("layer_fraction", 0.5)),
        require_both=require_both,
        roles=tuple(Role(r.strip()) for r in roles.split(",") if r.strip()),
    )
    ckpt = read_checkpoint(checkpoint_path)
    report = detect_outliers(ckpt, schema, config)
    manifest = build_manifest("detect", config.to_dict(), {"checkpoint": checkpoint_path},
                              deterministic=ctx.obj["deterministic"])
    payload = report.to_dict()
    payload["fingerprint"] = fingerprint(report)
    write_report(payload, manifest, out)
    click.echo(f"outlier dims: {report.outlier_dims}")


@main.command("mask")
@click.argument("checkpoint_path", type=click.Path(exists=True))
@add_options(schema_options)
@click.option("--plan", "plan_file", default=None, type=click.Path(exists=True),
              help="Mask plan JSON (overrides inline flags).")
@click.option("--dims", default=None, help="Dimensions, e.g. '308,381'.")
@click.option("--layers", default=None, help="Layer set, e.g. '0-11' (default: all).")
@click.option("--mode", default="ln-pair", type=click.Choice(["ln-pair", "dense-row"]),
              show_default=True)
@click.option("--baseline", default=None, type=click.Choice(["random", "lsf", "lb"]),
              help="Generate a baseline plan instead of masking explicit dims.")
@click.option("--n", default=None, type=int, help="Slot/dim count for --baseline.")
@click.option("--exclude", default=None, help="Dims excluded from random baselines.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(), help="Masked checkpoint output path.")
@click.pass_context
@handle_errors
def cmd_mask(ctx, checkpoint_path, preset, schema_file, plan_file, dims, layers, mode,
             baseline, n, exclude, seed, out):
    """Apply a weight-disabling plan and write the masked checkpoint."""
    schema = _resolve_schema(preset, schema_file)
    ckpt = read_checkpoint(checkpoint_path)
    if plan_file:
        plan = load_plan(plan_file)
    elif baseline:
        if n is None:
            raise click.UsageError("--baseline requires --n")
        kind = {"random": "random_dims", "lsf": "largest_scaling_factor", "lb": "largest_bias"}[baseline]
        spec = BaselineSpec(kind=kind, n=n, exclude=frozenset(_parse_int_list(exclude) or []), seed=seed)
        plan = plan_baseline(ckpt, schema, spec)
    else:
        dim_list = _parse_int_list(dims)
        if not dim_list:
            raise click.UsageError("provide --plan, --baseline, or --dims")
        layer_list = _parse_int_list(layers) or list(range(schema.num_layers))
        from .masking import PlanEntry
        role = "output_ln" if mode == "ln-pair" else "output_dense"
        entry = PlanEntry(role=role, layers=tuple(layer_list), dims=tuple(dim_list),
                          mode=mode.replace("-", "_"))
        plan = MaskPlan(entries=(entry,), provenance="manual", seed=seed)
    masked = apply_mask(ckpt, schema, plan)
    write_checkpoint(masked, out)
    save_plan(plan, Path(out).with_suffix(".plan.json"))
    manifest = build_manifest("mask", plan.to_dict(), {"checkpoint": checkpoint_path},
                              deterministic=ctx.obj["deterministic"])
    write_report({"modified_weights": count_modified_weights(plan, schema, ckpt),
                  "masked_checkpoint": str(out)}, manifest,
                 Path(out).with_suffix(".report.json"))
    click.echo(f"masked {count_modified_weights(plan, schema, ckpt)} weights -> {out}")


def _eval_config(**kwargs) -> EvalConfig:
    return EvalConfig(**{k: v for k, v in kwargs.items() if v is not None})


@main.command("eval")
@click.argument("checkpoint_path", type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True), help="Tokenizer vocab JSON.")
@click.option("--plan", "plan_file", default=None, type=click.Path(exists=True))
@click.option("--max-seq-len", default=256, show_default=True, type=int)
@click.option("--mask-prob", default=0.15, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--batch-size", default=16, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path())
@click.pass_context
@handle_errors
def cmd_eval(ctx, checkpoint_path, corpus, vocab, plan_file, max_seq_len, mask_prob,
             seed, batch_size, out):
    """MLM cross-entropy of a mini-encoder checkpoint, optionally masked."""
    params = _mini_params(checkpoint_path)
    tokenizer = WordTokenizer.load(vocab)
    sequences = load_corpus(corpus, tokenizer, max_seq_len)
    config = EvalConfig(max_seq_len=max_seq_len, mask_prob=mask_prob, seed=seed,
                        batch_size=batch_size)
    schema = mini_schema(params.config)
    if plan_file:
        plan = load_plan(plan_file)
        result = evaluate_plan(params, schema, sequences, plan, config)
    else:
        result = evaluate(params, sequences, config)
    manifest = build_manifest(
        "eval",
        {"max_seq_len": max_seq_len, "mask_prob": mask_prob, "seed": seed,
         "plan": plan_file, "ce_averaging": "global per-masked-token mean"},
        {"checkpoint": checkpoint_path, "corpus": corpus},
        deterministic=ctx.obj["deterministic"],
    )
    write_report(result.to_dict(), manifest, out)
    click.echo(f"cross-entropy {result.cross_entropy:.4f} over {result.masked_token_count} masked tokens")


@main.command("sweep")
@click.argument("checkpoint_path", type=click.Path(exists=True))
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--max-seq-len", default=256, show_default=True, type=int)
@click.option("--mask-prob", default=0.15, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(), help="Output TSV (dim, CE).")
@click.pass_context
@handle_errors
def cmd_sweep(ctx, checkpoint_path, corpus, vocab, max_seq_len, mask_prob, seed, out):
    """Per-dimension masking sweep over all hidden dimensions."""
    params = _mini_params(checkpoint_path)
    tokenizer = WordTokenizer.load(vocab)
    sequences = load_corpus(corpus, tokenizer, max_seq_len)
    config = EvalConfig(max_seq_len=max_seq_len, mask_prob=mask_prob, seed=seed)
    result = sweep_dims(params, mini_schema(params.config), sequences, config)
    sweep_tsv(result, out)
    manifest = build_manifest("sweep", {"mask_prob": mask_prob, "seed": seed},
                              {"checkpoint": checkpoint_path, "corpus": corpus},
                              deterministic=ctx.obj["deterministic"])
    top = int(np.argmax([r.cross_entropy for r in result.per_dim]))
    write_report({"tsv": str(out), "baseline_ce": result.baseline.cross_entropy,
                  "top_dim": top, "top_dim_ce": result.per_dim[top].cross_entropy},
                 manifest, Path(out).with_suffix(".report.json"))
    click.echo(f"top-impact dim {top} (CE {result.per_dim[top].cross_entropy:.4f}); wrote {out}")


@main.command("heatmap")
@click.argument("checkpoint_path", type=click.Path(exists=True))
@click.option("--text", default=None, help="Input passage (default: first corpus document).")
@click.option("--corpus", default=None, type=click.Path(exists=True))
@click.option("--vocab", required=True, type=click.Path(exists=True))
@click.option("--mark", default=None, help="Dims to annotate, e.g. '308,381'.")
@click.option("--max-seq-len", default=256, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path(), help="Output TSV (layer, token, dim, value).")
@click.pass_context
@handle_errors
def cmd_heatmap(ctx, checkpoint_path, text, corpus, vocab, mark, max_seq_len, out):
    """Per-layer output-embedding heatmap data for one passage."""
    params = _mini_params(checkpoint_path)
    tokenizer = WordTokenizer.load(vocab)
    if text is None:
        if corpus is None:
            raise click.UsageError("provide --text or --corpus")
        text = read_documents(corpus)[0]
    from .data import chunk_ids
    ids = chunk_ids(tokenizer.encode_words(text), max_seq_len)[0]
    result = embedding_heatmap(params, ids, _parse_int_list(mark))
    heatmap_tsv(result, out)
    inputs = {"checkpoint": checkpoint_path}
    if corpus:
        inputs["corpus"] = corpus
    manifest = build_manifest("heatmap", {"marked_dims": result.marked_dims}, inputs,
                              deterministic=ctx.obj["deterministic"])
    write_report({"tsv": str(out), "tokens": len(ids), "marked_dims": result.marked_dims},
                 manifest, Path(out).with_suffix(".report.json"))
    click.echo(f"wrote {out}")


@main.command("train")
@click.option("--corpus", required=True, type=click.Path(exists=True))
@click.option("--num-layers", default=4, show_default=True, type=int)
@click.option("--hidden-dim", default=64, show_default=True, type=int)
@click.option("--num-heads", default=4, show_default=True, type=int)
@click.option("--ff-dim", default=128, show_default=True, type=int)
@click.option("--vocab-size", default=2000, show_default=True, type=int)
@click.option("--max-seq-len", default=64, show_default=True, type=int)
@click.option("--steps", default=1000, show_default=True, type=int)
@click.option("--batch-size", default=16, show_default=True, type=int)
@click.option("--learning-rate", default=1e-4, show_default=True, type=float)
@click.option("--mask-prob", default=0.15, show_default=True, type=float)
@click.option("--snapshot-every", default=2000, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Snapshot directory.")
@click.pass_context
@handle_errors
def cmd_train(ctx, corpus, num_layers, hidden_dim, num_heads, ff_dim, vocab_size,
              max_seq_len, steps, batch_size, learning_rate, mask_prob, snapshot_every,
              seed, out_dir):
    """Train the miniature encoder, snapshotting checkpoints periodically."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    docs = read_documents(corpus)
    tokenizer = WordTokenizer.train(docs, max_vocab=vocab_size)
    tokenizer.save(out_dir / "vocab.json")
    sequences = load_corpus(corpus, tokenizer, max_seq_len)
    encoder_config = EncoderConfig(
        num_layers=num_layers, hidden_dim=hidden_dim, num_heads=num_heads, ff_dim=ff_dim,
        vocab_size=tokenizer.vocab_size, max_seq_len=max_seq_len,
    )
    train_config = TrainConfig(learning_rate=learning_rate, batch_size=batch_size,
                               total_steps=steps, mask_prob=mask_prob, seed=seed,
                               snapshot_every=snapshot_every)
    result = train(sequences, encoder_config, train_config, out_dir)
    write_loss_csv(result.loss_log, out_dir / "loss.csv")
    schema = mini_schema(encoder_config)
    points = track_ln_trajectories(result.snapshot_paths, schema)
    export_trajectories_tsv(points, out_dir / "ln_trajectories.tsv")
    manifest = build_manifest(
        "train",
        {"encoder": json.loads(encoder_config.to_json()),
         "train": {"steps": steps, "batch_size": batch_size, "learning_rate": learning_rate,
                   "mask_prob": mask_prob, "snapshot_every": snapshot_every, "seed": seed}},
        {"corpus": corpus},
        deterministic=ctx.obj["deterministic"],
    )
    write_report({"snapshots": [str(p) for p in result.snapshot_paths],
                  "final_loss": result.loss_log[-1][1] if result.loss_log else None},
                 manifest, out_dir / "train.report.json")
    click.echo(f"{len(result.snapshot_paths)} snapshots in {out_dir}")


@main.command("fingerprint")
@click.argument("checkpoint_path", type=click.Path(exists=True))
@add_options(schema_options)
@click.pass_context
@handle_errors
def cmd_fingerprint(ctx, checkpoint_path, preset, schema_file):
    """Checkpoint content digest plus the outlier-report fingerprint."""
    schema = _resolve_schema(preset, schema_file)
    ckpt = read_checkpoint(checkpoint_path)
    report = detect_outliers(ckpt, schema)
    click.echo(f"checkpoint {ckpt.digest()}")
    click.echo(f"report {fingerprint(report)}")


if __name__ == "__main__":
    main()
