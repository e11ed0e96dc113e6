"""``mcti`` command line.

Exit codes: 0 success, 2 configuration or input error, 3 capability error
(e.g. sampling on a classify-only backend), 4 some concepts failed to train.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path

import click

from . import classifier as clf_mod
from .backend import load_backend
from .config import RunConfig, load_config
from .core import PromptLibrary, load_templates
from .errors import ConfigError, MCTIError, PartialTrainingError
from .features import (
    build_feature_cache,
    dataset_from_cache,
    encode_split,
    ingest_dataset,
    load_cache,
    remainder,
    sample_nshot,
    save_cache,
)
from .store import TokenStore
from .trainer import train_concepts, train_unified_context

logger = logging.getLogger("mcti")


def _config(ctx: click.Context, **overrides) -> RunConfig:
    return load_config(ctx.obj.get("config"), overrides)


def _backend(cfg: RunConfig):
    return load_backend(cfg.section("backend"))


def _cache_path(cfg: RunConfig, cache):
    return Path(cache) if cache else cfg.out_path(cfg["output"]["cache_name"])


def _store_path(cfg: RunConfig, store):
    return Path(store) if store else cfg.out_path(cfg["output"]["store_dir"])


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")


def _nan_to_none(x: float):
    return None if x != x else x


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="YAML run configuration.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def cli(ctx, config_path, verbose):
    """Multi-class textual inversion: learn one token per class, classify with them."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.ensure_object(dict)
    ctx.obj["config"] = config_path


@cli.command()
@click.option("--data", "root", help="Dataset root (class subdirs) or manifest CSV.")
@click.option("--layout", type=click.Choice(["class-subdirs", "manifest-file"]), default=None)
@click.option("-N", "--shots", "N", type=int, default=None, help="Samples per class.")
@click.option("--seed", type=int, default=None, help="Global seed (overrides MCTI_SEED).")
@click.option("--split-seed", type=int, default=None)
@click.option("--out", "out", default=None, help="Cache path prefix.")
@click.pass_context
def cache(ctx, root, layout, N, seed, split_seed, out):
    """Sample an N-shot split and pre-extract its image features."""
    cfg = _config(ctx, **{"dataset.root": root, "dataset.layout": layout, "dataset.N": N,
                          "seed": seed, "dataset.split_seed": split_seed})
    ds_cfg = cfg["dataset"]
    if "root" not in ds_cfg:
        raise ConfigError("no dataset root given (--data or dataset.root)")
    backend = _backend(cfg)
    index = ingest_dataset(ds_cfg["root"], ds_cfg["layout"], ds_cfg.get("dataset_id"))
    ds = sample_nshot(index, int(ds_cfg["N"]), cfg.split_seed)
    fc = build_feature_cache(ds, backend)
    manifest = save_cache(fc, _cache_path(cfg, out))
    click.echo(f"cached K={fc.K} N={fc.N} D={fc.D_feat} -> {manifest} (sha256 {fc.checksum()})")


@cli.command()
@click.option("--cache", "cache_path", default=None)
@click.option("--store", "store_path", default=None, help="Output token store directory.")
@click.option("--alpha", type=float, default=None)
@click.option("--beta", type=float, default=None)
@click.option("--scale", "scale_s", type=float, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--warmup-steps", type=int, default=None)
@click.option("--mcti-steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("-P", "--parallelism", type=int, default=None)
@click.option("--skip-warmup", is_flag=True, help="Start MC-TI from --warm-store tokens.")
@click.option("--warm-store", default=None, help="Token store holding warmed-up tokens.")
@click.option("--templates", "templates_file", default=None, help="Training template library.")
@click.option("--log-dir", default=None, help="Write per-class JSONL step logs here.")
@click.pass_context
def train(ctx, cache_path, store_path, alpha, beta, scale_s, lr, warmup_steps, mcti_steps, seed,
          parallelism, skip_warmup, warm_store, templates_file, log_dir):
    """Learn one concept token per class."""
    cfg = _config(ctx, **{"train.alpha": alpha, "train.beta": beta, "train.scale_s": scale_s,
                          "train.lr": lr, "train.warmup_steps": warmup_steps,
                          "train.mcti_steps": mcti_steps, "train.rng_seed": seed,
                          "train.parallelism": parallelism, "train.templates_file": templates_file})
    tcfg = cfg.train_config()
    backend = _backend(cfg)
    fc = load_cache(_cache_path(cfg, cache_path), backend=backend)
    ds = dataset_from_cache(fc)
    templates = None
    if cfg["train"].get("templates_file"):
        templates = load_templates(cfg["train"]["templates_file"], prefix="train")
    warm = None
    if skip_warmup:
        if not warm_store:
            raise ConfigError("--skip-warmup needs --warm-store")
        warm = TokenStore.load(warm_store, backend=backend).tokens
    elif warm_store:
        raise ConfigError("--warm-store only makes sense with --skip-warmup")

    def on_done(k, result):
        if log_dir:
            p = Path(log_dir)
            p.mkdir(parents=True, exist_ok=True)
            with open(p / f"class_{k:02d}.jsonl", "w", encoding="utf-8") as fh:
                for rec in result.step_log:
                    fh.write(rec.to_json() + "\n")

    results, failures = train_concepts(ds, fc, tcfg, backend,
                                       parallelism=int(cfg["train"].get("parallelism", 1)),
                                       templates=templates, warm_tokens=warm,
                                       skip_warmup=skip_warmup, on_done=on_done)
    store = TokenStore.from_training({k: r.token for k, r in results.items()},
                                     backend=backend, dataset=ds, config=tcfg)
    out = _store_path(cfg, store_path)
    store.save(out)
    if failures:
        raise PartialTrainingError(failures, store)
    click.echo(f"trained {len(results)} tokens -> {out} (sha256 {store.checksum()[:16]})")


def _test_samples(cfg: RunConfig, test_root, test_layout, fc):
    ds_cfg = cfg["dataset"]
    root = test_root or ds_cfg.get("test_root")
    if root:
        index = ingest_dataset(root, test_layout or ds_cfg.get("test_layout", "class-subdirs"))
        return [(ref, k) for k, ref in index.items()], index.dataset_id
    if ds_cfg.get("root") and fc is not None:
        index = ingest_dataset(ds_cfg["root"], ds_cfg["layout"], ds_cfg.get("dataset_id"))
        return remainder(index, dataset_from_cache(fc)), index.dataset_id
    raise ConfigError("no test data: pass --test-root or set dataset.test_root")


@cli.command("eval")
@click.option("--store", "store_path", default=None)
@click.option("--cache", "cache_path", default=None, help="Training cache (to exclude its samples).")
@click.option("--test-root", default=None)
@click.option("--test-layout", type=click.Choice(["class-subdirs", "manifest-file"]), default=None)
@click.option("--template", "template_id", default=None, help="Template id (T1, T2, T3, vis_XX).")
@click.option("--context/--no-context", "use_context", default=None,
              help="Use the store's learned context instead of a template.")
@click.option("--scale", "s", type=float, default=None)
@click.option("--report", default=None, help="Write the JSON report here (default: stdout).")
@click.pass_context
def eval_cmd(ctx, store_path, cache_path, test_root, test_layout, template_id, use_context, s, report):
    """Classify held-out images with the learned tokens."""
    cfg = _config(ctx, **{"eval.template_id": template_id, "eval.use_context": use_context,
                          "eval.s": s})
    backend = _backend(cfg)
    store = TokenStore.load(_store_path(cfg, store_path), backend=backend)
    ev = cfg["eval"]
    template = PromptLibrary.default().template(ev["template_id"])
    context = None
    if ev["use_context"]:
        if store.context is None:
            raise ConfigError("store has no learned context; run context-train first")
        context = store.context
    fc = None
    cp = _cache_path(cfg, cache_path)
    if Path(f"{cp}.manifest.json").exists() or cache_path:
        fc = load_cache(cp, backend=backend)
    samples, dataset_id = _test_samples(cfg, test_root, test_layout, fc)
    feats, labels = encode_split(samples, backend)
    clf = clf_mod.build_text_classifier(store, template, context, backend=backend)
    acc, per = clf_mod.evaluate_accuracy(clf, list(zip(feats, labels)), ev["s"], per_class=True)
    result = {
        "dataset_id": store.dataset_id or dataset_id,
        "N": store.N,
        "K": store.K,
        "template_id": "context" if context is not None else template.template_id,
        "s": ev["s"],
        "accuracy": acc,
        "per_class_accuracy": [_nan_to_none(per[k]) for k in range(1, store.K + 1)],
        "seed": cfg.seed,
    }
    if report:
        _write_json(report, result)
    click.echo(json.dumps(result))


@cli.command("gen-eval")
@click.option("--store", "store_path", default=None)
@click.option("--cache", "cache_path", default=None)
@click.option("--n-samples", type=int, default=None)
@click.option("--template", "template_id", default=None)
@click.option("--report", default=None)
@click.pass_context
def gen_eval(ctx, store_path, cache_path, n_samples, template_id, report):
    """Generate images from each token and score them against the training features."""
    cfg = _config(ctx, **{"eval.n_samples": n_samples, "eval.template_id": template_id})
    backend = _backend(cfg)
    store = TokenStore.load(_store_path(cfg, store_path), backend=backend)
    fc = load_cache(_cache_path(cfg, cache_path), backend=backend)
    template = PromptLibrary.default().template(cfg["eval"]["template_id"])
    sims = clf_mod.generation_similarity(store, backend, fc, cfg["eval"]["n_samples"], template,
                                         seed=cfg.seed)
    result = {"dataset_id": store.dataset_id, "K": store.K, "N": store.N,
              "template_id": template.template_id, "n_samples": cfg["eval"]["n_samples"],
              "per_class_similarity": [sims[k] for k in sorted(sims)],
              "mean_similarity": sum(sims.values()) / len(sims), "seed": cfg.seed}
    if report:
        _write_json(report, result)
    click.echo(json.dumps(result))


@cli.command()
@click.option("--store", "store_path", default=None)
@click.option("--out", "out", required=True, help="CSV with class,template_id,x,y rows.")
@click.option("--templates", "templates_file", default=None,
              help="Template library (default: the packaged visualization set).")
@click.pass_context
def visualize(ctx, store_path, out, templates_file):
    """2-D PCA of every (template, class) text feature."""
    cfg = _config(ctx)
    backend = _backend(cfg)
    store = TokenStore.load(_store_path(cfg, store_path), backend=backend)
    templates = (load_templates(templates_file, prefix="vis") if templates_file
                 else PromptLibrary.default().visualization_templates)
    proj = clf_mod.project_text_features(store, templates, backend)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "template_id", "x", "y"])
        for row in proj.rows():
            w.writerow(row)
    ratio = ", ".join(f"{r:.3f}" for r in proj.explained_variance_ratio)
    click.echo(f"wrote {out}; explained variance ratio [{ratio}]; "
               f"within/between {clf_mod.cluster_ratio(proj):.4f}")


@cli.command("context-train")
@click.option("--store", "store_path", default=None)
@click.option("--cache", "cache_path", default=None)
@click.option("-M", "--context-tokens", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--lr", "context_lr", type=float, default=None)
@click.pass_context
def context_train(ctx, store_path, cache_path, context_tokens, epochs, context_lr):
    """Learn shared context vectors for frozen tokens and add them to the store."""
    cfg = _config(ctx, **{"train.context_tokens": context_tokens, "train.context_epochs": epochs,
                          "train.context_lr": context_lr})
    tcfg = cfg.train_config()
    backend = _backend(cfg)
    path = _store_path(cfg, store_path)
    store = TokenStore.load(path, backend=backend)
    fc = load_cache(_cache_path(cfg, cache_path), backend=backend)
    from .core import FewShotDataset

    ds = FewShotDataset(K=fc.K, N=fc.N, samples={k: (None,) * fc.N for k in range(1, fc.K + 1)},
                        dataset_id=fc.dataset_id)
    store.context = train_unified_context(store.tokens, ds, fc, tcfg.context_tokens, tcfg, backend)
    store.save(path)
    h = store.context.history
    click.echo(f"context M={store.context.M} loss {h[0]:.4f} -> {h[-1]:.4f}" if h
               else f"context M={store.context.M} (0 epochs)")


@cli.command()
@click.option("--out", "out", required=True, help="Directory to write train/ and test/ into.")
@click.option("-K", "--classes", "K", type=int, default=5)
@click.option("--n-train", type=int, default=20)
@click.option("--n-test", type=int, default=20)
@click.option("--seed", type=int, default=0)
@click.pass_context
def synth(ctx, out, K, n_train, n_test, seed):
    """Write a synthetic dataset for the toy backend."""
    from .synthetic import SyntheticSpec, write_synthetic

    cfg = _config(ctx)
    backend = _backend(cfg)
    if backend.descriptor.name != "toy":
        raise ConfigError("synthetic data needs the toy backend")
    write_synthetic(out, backend, SyntheticSpec(K=K, n_train=n_train, n_test=n_test, seed=seed))
    click.echo(f"wrote {K} classes to {out}/train and {out}/test")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="mcti", standalone_mode=False)
    except PartialTrainingError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except MCTIError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 2
    except (KeyError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
