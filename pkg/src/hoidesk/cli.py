"""Command-line entry point: ``hoidesk <subcommand> [flags]``.

Every subcommand writes ``config.json`` (the fully resolved run config) and
``summary.json`` into ``--out``. Re-running with ``--config <out>/config.json``
repeats the run. Exit codes: 0 ok, 1 check failed, 2 config, 3 data, 4 internal.
"""
from __future__ import annotations

import argparse
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import errors
from .classifiers import (
    ClassifierBank,
    RegionFeatureStore,
    build_verb_classifier,
    build_verb_classifier_hoi_average,
    build_verb_classifier_sentence,
)
from .config import RunConfig, load_config, override, save_config
from .data_io import (
    SyntheticConfig,
    generate_synthetic,
    load_features,
    load_fixture,
    load_manifest,
    restrict_categories,
    subsample_training,
    write_world,
)
from .evaluation import compute_map, construct_split, make_validation_split
from .inference import (
    InferenceConfig,
    ground_truth_annotations,
    image_scores,
    load_predictions,
    perfect_predictions,
    predict_batch,
    save_predictions,
)
from .matching import LossConfig
from .model import HOIModel, ModelConfig, load_params, save_params
from .taxonomy import Taxonomy, write_json
from .tensor import hctf
from .training import TrainConfig, load_batch, make_batch, model_gradcheck, train

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3, 4

CONFIG_ERRORS = (errors.ConfigError, errors.BadConfig, errors.BadMode, errors.BadFraction, errors.KOutOfRange)
DATA_ERRORS = (errors.DataError, errors.FormatError, errors.FileError, errors.Infeasible, errors.MissingVerbData,
               errors.UnknownCategory, errors.InvalidBox, errors.ShapeMismatch)

# flag dest -> dotted config field
FLAG_FIELDS = {
    "seed": "seed",
    "data": "paths.data",
    "checkpoint": "paths.checkpoint",
    "bank": "paths.bank",
    "predictions": "paths.predictions",
    "unseen_file": "paths.unseen_file",
    "builder": "verb_builder",
    "alpha": "inference.alpha",
    "topk": "inference.topk",
    "score_mode": "inference.triplet_score_mode",
    "split": "inference.split",
    "workers": "inference.workers",
    "dump_attention": "inference.dump_attention",
    "split_mode": "split.mode",
    "n_unseen": "split.n_unseen",
    "restrict_seen": "split.restrict_seen",
    "fraction": "split.fraction",
    "val_fraction": "split.val_fraction",
    "steps": "train.steps",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "num_train": "synthetic.num_train",
    "num_test": "synthetic.num_test",
    "sigma": "synthetic.sigma",
}
PATH_FLAGS = {"data", "checkpoint", "bank", "predictions", "unseen_file"}


# ---------------------------------------------------------------------------
# shared plumbing


def _require(value, flag: str):
    if value is None:
        raise errors.ConfigError(f"{flag} is required")
    return value


def _inference_config(cfg: RunConfig) -> InferenceConfig:
    i = cfg.inference
    return InferenceConfig(alpha=i.alpha, topk=i.topk, enhance=i.enhance, triplet_score_mode=i.triplet_score_mode,
                           nms_iou=i.nms_iou, keep_top=i.keep_top)


def _split(cfg: RunConfig, tax: Taxonomy):
    return construct_split(cfg.split.mode, tax, seed=cfg.seed, n_unseen=cfg.split.n_unseen,
                           path=cfg.paths.unseen_file)


def _verb_classifier(cfg: RunConfig, data: Path, tax: Taxonomy, seen=None) -> tuple[np.ndarray, list[int]]:
    """(E_v, verbs that fell back to the sentence embedding)."""
    if cfg.verb_builder == "sentence":
        return build_verb_classifier_sentence(load_fixture(data, "verb_text"), tax.num_verbs), []
    if cfg.verb_builder == "hoi-average":
        return build_verb_classifier_hoi_average(load_fixture(data, "e_inter"), tax), []
    store = RegionFeatureStore.load(data / "regions")
    if seen is not None:
        store = store.restrict(tax, seen)
    have = {k for (k, j) in store.hoi if j in store.obj}
    missing = [k for k in range(tax.num_verbs) if k not in have]
    return build_verb_classifier(store, tax, fallback=load_fixture(data, "verb_text")), missing


def _load_bank(cfg: RunConfig, data: Path, tax: Taxonomy) -> ClassifierBank:
    if cfg.paths.bank is not None:
        return ClassifierBank.load(cfg.paths.bank)
    seen = _split(cfg, tax).seen if cfg.split.restrict_seen else None
    e_verb, _ = _verb_classifier(cfg, data, tax, seen)
    return ClassifierBank(e_verb, load_fixture(data, "e_inter"), tax.templates())


def _model_config(cfg: RunConfig, tax: Taxonomy, clip_dim: int, det_dim: int) -> ModelConfig:
    m = cfg.model
    return ModelConfig(num_objects=tax.num_objects, dim=m.dim, clip_dim=clip_dim, det_dim=det_dim,
                       num_queries=m.num_queries, num_layers=m.num_layers, num_heads=m.num_heads,
                       ffn_hidden=m.ffn_hidden, instance_layers=m.instance_layers, instance_heads=m.instance_heads,
                       instance_ffn=m.instance_ffn, dropout=m.dropout, seed=cfg.seed)


def _train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(steps=t.steps, lr=t.lr, weight_decay=t.weight_decay, batch_size=t.batch_size,
                       lr_drop=t.lr_drop, grad_clip=t.grad_clip, alpha=cfg.inference.alpha,
                       loss=LossConfig(**vars(cfg.loss)), seed=cfg.seed)


def _map_summary(res) -> dict:
    return {"map": res.mean, "rare": res.rare, "non_rare": res.non_rare,
            "per_category": {str(k): v for k, v in sorted(res.per_category.items())}}


# ---------------------------------------------------------------------------
# subcommands; each returns (summary dict, exit code)


def cmd_gen_synth(cfg: RunConfig, out: Path):
    world = generate_synthetic(cfg.synthetic)
    manifests = write_world(world, out)
    for split, man in manifests.items():
        save_predictions(out / "fixtures" / f"perfect_{split}.jsonl", perfect_predictions(man))
    tax = world.taxonomy
    print(f"wrote {len(manifests['train'].records)} train / {len(manifests['test'].records)} test images to {out}")
    return {"num_objects": tax.num_objects, "num_verbs": tax.num_verbs, "num_hois": tax.num_hois,
            "num_train": len(manifests["train"].records), "num_test": len(manifests["test"].records)}, EXIT_OK


def cmd_build_verb_classifier(cfg: RunConfig, out: Path):
    data = Path(_require(cfg.paths.data, "--data"))
    tax = Taxonomy.load(data / "taxonomy.json")
    seen = _split(cfg, tax).seen if cfg.split.restrict_seen else None
    e_verb, missing = _verb_classifier(cfg, data, tax, seen)
    bank = ClassifierBank(e_verb, load_fixture(data, "e_inter"), tax.templates())
    bank.save(out / "bank")
    print(f"verb classifier ({cfg.verb_builder}): {e_verb.shape[0]} verbs, {len(missing)} from text fallback")
    return {"builder": cfg.verb_builder, "num_verbs": int(e_verb.shape[0]), "fallback_verbs": missing,
            "bank": str(out / "bank")}, EXIT_OK


def cmd_train_toy(cfg: RunConfig, out: Path):
    data = Path(_require(cfg.paths.data, "--data"))
    man = load_manifest(data, "train")
    tax = man.taxonomy
    if cfg.split.restrict_seen:
        man = restrict_categories(man, _split(cfg, tax).seen)
    if cfg.split.fraction < 1.0:
        man = subsample_training(man, cfg.split.fraction, cfg.seed)
    if not man.records:
        raise errors.DataError("no training images left")
    bank = _load_bank(cfg, data, tax)
    bank.save(out / "bank")
    batch = load_batch(man)
    mcfg = _model_config(cfg, tax, batch.v_s.shape[-1], batch.v_d.shape[-1])
    clip_proj = None
    if (data / "classifiers" / "clip_proj.hctf").is_file():
        clip_proj = load_fixture(data, "clip_proj")
        if clip_proj.shape != (mcfg.clip_dim, mcfg.dim):
            print(f"projection fixture {clip_proj.shape} does not fit the model; using random init", file=sys.stderr)
            clip_proj = None
    model = HOIModel(mcfg, clip_proj=clip_proj)
    with open(out / "train_log.jsonl", "w") as log:
        hist = train(model, batch, bank, tax, _train_config(cfg), log=log)
    save_params(model, out / "checkpoint")
    preds, _ = predict_batch(model, [load_features(man, r) for r in man.records], man.records, bank, tax,
                             _inference_config(cfg))
    res = compute_map(preds, ground_truth_annotations(man), tax.num_hois)
    final = hist[-1]["loss"] if hist else None
    print(f"trained {cfg.train.steps} steps on {len(man.records)} images: loss {final}, train mAP {res.mean:.6f}")
    return {"steps": cfg.train.steps, "num_images": len(man.records), "final_loss": final,
            "train_map": res.mean, "checkpoint": str(out / "checkpoint"), "bank": str(out / "bank")}, EXIT_OK


def _dump_traces(root: Path, traces) -> None:
    for layer, tr in enumerate(traces):
        hctf.save(root / f"layer{layer}.self.hctf", np.asarray(getattr(tr.self_attn, "data", tr.self_attn))[0])
        for m, w in enumerate(tr.cross_attn):
            hctf.save(root / f"layer{layer}.cross{m}.hctf", np.asarray(getattr(w, "data", w))[0])


def cmd_infer(cfg: RunConfig, out: Path):
    data = Path(_require(cfg.paths.data, "--data"))
    model = load_params(_require(cfg.paths.checkpoint, "--checkpoint"))
    man = load_manifest(data, cfg.inference.split)
    tax = man.taxonomy
    bank = _load_bank(cfg, data, tax)
    icfg = _inference_config(cfg)
    dump = cfg.inference.dump_attention

    def one(rec):
        fb = load_features(man, rec)
        preds, fwd = predict_batch(model, [fb], [rec], bank, tax, icfg, keep_traces=dump)
        scores = image_scores(fwd, 0, fb.v_g, bank, tax, icfg)
        hctf.save(out / "scores" / f"{rec.image_id}.hctf", scores)
        if dump:
            _dump_traces(out / "attention" / rec.image_id, fwd.traces)
        return rec.image_id, preds[rec.image_id]

    records = sorted(man.records, key=lambda r: r.image_id)
    with ThreadPoolExecutor(max_workers=cfg.inference.workers) as pool:
        results = list(pool.map(one, records))
    preds = dict(results)
    save_predictions(out / "predictions.jsonl", preds)
    res = compute_map(preds, ground_truth_annotations(man), tax.num_hois)
    print(f"inferred {len(records)} images (K={icfg.topk}, alpha={icfg.alpha}, enhance={icfg.enhance}): "
          f"mAP {res.mean:.6f}")
    return {"num_images": len(records), "num_predictions": sum(len(v) for v in preds.values()),
            "topk": icfg.topk, "alpha": icfg.alpha, "enhance": icfg.enhance, **_map_summary(res)}, EXIT_OK


def cmd_eval_map(cfg: RunConfig, out: Path):
    data = Path(_require(cfg.paths.data, "--data"))
    man = load_manifest(data, cfg.inference.split, check_files=False)
    tax = man.taxonomy
    preds = load_predictions(_require(cfg.paths.predictions, "--predictions"))
    gts = ground_truth_annotations(man)
    res = compute_map(preds, gts, tax.num_hois, rare_mask=tax.rare_mask())
    summary = _map_summary(res)
    line = f"mAP {res.mean:.6f}" if res.mean is not None else "mAP n/a"
    if cfg.split.restrict_seen:
        sp = _split(cfg, tax)
        for name, cats in (("unseen", sp.unseen), ("seen", sp.seen)):
            r = compute_map(preds, gts, tax.num_hois, category_subset=cats)
            summary[name] = r.mean
            line += f" {name} {r.mean:.6f}" if r.mean is not None else f" {name} n/a"
    print(line)
    return summary, EXIT_OK


def cmd_make_splits(cfg: RunConfig, out: Path):
    data = Path(_require(cfg.paths.data, "--data"))
    tax = Taxonomy.load(data / "taxonomy.json")
    sp = _split(cfg, tax)
    write_json(out / "splits" / f"{sp.mode}.json", sp.to_dict())
    print(f"{sp.mode}: {len(sp.unseen)} unseen / {len(sp.seen)} seen categories")
    return {"mode": sp.mode, "num_unseen": len(sp.unseen), "num_seen": len(sp.seen),
            "selected": list(sp.selected)}, EXIT_OK


def cmd_make_val_split(cfg: RunConfig, out: Path):
    data = Path(_require(cfg.paths.data, "--data"))
    man = load_manifest(data, "train", check_files=False)
    labels = {r.image_id: [h for t in r.triplets for h in t.hois] for r in man.records}
    val, tr = make_validation_split(labels, cfg.seed, val_fraction=cfg.split.val_fraction)
    write_json(out / "splits" / "val.json", {"seed": cfg.seed, "train": tr, "val": val})
    print(f"validation split: {len(tr)} train / {len(val)} val images")
    return {"num_train": len(tr), "num_val": len(val)}, EXIT_OK


def cmd_subsample(cfg: RunConfig, out: Path):
    data = Path(_require(cfg.paths.data, "--data"))
    man = load_manifest(data, "train", check_files=False)
    sub = subsample_training(man, cfg.split.fraction, cfg.seed)
    ids = sorted(sub.image_ids)
    write_json(out / "splits" / "subsample.json", {"fraction": cfg.split.fraction, "seed": cfg.seed, "image_ids": ids})
    print(f"subsample: {len(ids)} of {len(man.records)} images")
    return {"num_images": len(ids), "total": len(man.records)}, EXIT_OK


def cmd_gradcheck(cfg: RunConfig, out: Path, tol: float = 1e-4, max_coords: int | None = 8):
    world = generate_synthetic(SyntheticConfig(num_objects=4, num_verbs=3, dim=16, det_dim=8, grid=3,
                                               num_train=2, num_test=0, seed=cfg.seed))
    tax = world.taxonomy
    bank = ClassifierBank(build_verb_classifier(world.regions, tax, fallback=world.verb_text), world.e_inter)
    records = world.records("train")
    batch = make_batch([world.features[r.image_id] for r in records], [r.triplets for r in records])
    model = HOIModel(_model_config(cfg, tax, batch.v_s.shape[-1], batch.v_d.shape[-1]), clip_proj=world.clip_proj)
    # move away from the zero-bias initialisation so every path carries gradient
    rng = np.random.default_rng(cfg.seed)
    for p in model.parameters():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    err = model_gradcheck(model, batch, bank, tax, _train_config(cfg), max_coords=max_coords, seed=cfg.seed)
    ok = err <= tol
    print(f"max rel-err {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {tol:g})")
    return {"max_rel_err": err, "tolerance": tol, "passed": ok}, EXIT_OK if ok else EXIT_CHECK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "build-verb-classifier": cmd_build_verb_classifier,
    "train-toy": cmd_train_toy,
    "infer": cmd_infer,
    "eval-map": cmd_eval_map,
    "make-splits": cmd_make_splits,
    "make-val-split": cmd_make_val_split,
    "subsample": cmd_subsample,
    "gradcheck": cmd_gradcheck,
}


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hoidesk", description="Desk-scale HOI detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, *groups):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON run config (flags override it)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, required=True, help="run directory")
        for g in groups:
            g(p)
        return p

    def data(p):
        p.add_argument("--data", type=Path, help="dataset root")

    def split(p):
        p.add_argument("--split-mode", choices=["rf-uc", "nf-uc", "uo", "uv", "uc-file"])
        p.add_argument("--n-unseen", type=int)
        p.add_argument("--unseen-file", type=Path)
        p.add_argument("--restrict-seen", action="store_true", default=None,
                       help="drop unseen categories from training data / report seen and unseen mAP")

    def scoring(p):
        p.add_argument("--bank", type=Path, help="classifier bank directory")
        p.add_argument("--alpha", type=float)
        p.add_argument("--topk", type=int)
        p.add_argument("--no-enhance", action="store_true", help="skip the zero-shot enhancement path")
        p.add_argument("--score-mode", choices=["squared", "product"])

    def synth(p):
        p.add_argument("--num-train", type=int)
        p.add_argument("--num-test", type=int)
        p.add_argument("--sigma", type=float)

    def builder(p):
        p.add_argument("--builder", choices=["arithmetic", "sentence", "hoi-average"])

    def training(p):
        p.add_argument("--steps", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--fraction", type=float)

    def inference(p):
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--split", choices=["train", "test"])
        p.add_argument("--workers", type=int)
        p.add_argument("--dump-attention", action="store_true", default=None)

    def evaluation(p):
        p.add_argument("--predictions", type=Path)
        p.add_argument("--split", choices=["train", "test"])

    add("gen-synth", "generate a synthetic dataset into --out", synth)
    add("build-verb-classifier", "build the verb classifier bank", data, builder, split)
    add("train-toy", "train a toy model", data, builder, split, training, scoring)
    add("infer", "score a split with a trained checkpoint", data, scoring, inference)
    add("eval-map", "mAP of a predictions file", data, split, evaluation)
    add("make-splits", "zero-shot category split", data, split)
    vs = add("make-val-split", "validation split keeping every class in training", data)
    vs.add_argument("--val-fraction", type=float)
    ss = add("subsample", "nested training subsample", data)
    ss.add_argument("--fraction", type=float)
    gc = add("gradcheck", "finite-difference check of the full training loss", builder)
    gc.add_argument("--tol", type=float, default=1e-4)
    gc.add_argument("--max-coords", type=int, default=8, help="coordinates sampled per parameter tensor (0: all)")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config is not None else RunConfig()
    for dest, dotted in FLAG_FIELDS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        if dest in PATH_FLAGS:
            value = str(Path(value).resolve())
        override(cfg, dotted, value)
    if args.seed is not None:
        cfg.synthetic.seed = args.seed
    if getattr(args, "no_enhance", False):
        cfg.inference.enhance = False
    if getattr(args, "split_mode", None) is not None and getattr(args, "restrict_seen", None) is None \
            and args.command in ("train-toy", "build-verb-classifier", "eval-map"):
        cfg.split.restrict_seen = True
    try:
        cfg.synthetic = SyntheticConfig.from_dict(cfg.synthetic.to_dict())
    except errors.BadConfig as exc:
        raise errors.ConfigError(f"synthetic: {exc}") from None
    return cfg.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out / "config.json")
        if args.command == "gradcheck":
            summary, code = cmd_gradcheck(cfg, out, args.tol, args.max_coords or None)
        else:
            summary, code = COMMANDS[args.command](cfg, out)
        write_json(out / "summary.json", {"command": args.command, "exit_code": code, **summary})
        return code
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - last-resort category for the exit code
        traceback.print_exc()
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
