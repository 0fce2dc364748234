"""Command-line entry point tying the pipeline together.

Subcommands: slic, extract, reduce, train, segment, evaluate, ranktest.
Every flag has a config-file equivalent: pass ``--config file.ini`` where the
file holds ``key = value`` lines under a ``[subcommand]`` section header;
explicit flags override config values.  Exit codes: 0 success, 2 usage
error, 3 data error, 4 numeric or training failure.  All failures print a
single machine-parsable line ``error: <category>: <detail>`` to stderr.

Output files are written atomically (temp file + rename).  The environment
variable ULCERSEG_THREADS caps worker threads for per-superpixel
classification (0 = one per CPU).
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
import tempfile

import numpy as np

from . import classifiers, dataset, evaluation, mpeg7, neural, pca, pipeline, slic
from .errors import (ConfigurationError, DataError, InvalidArgumentError,
                     MaeUndefinedError, NotFoundError, TrainingError, UlcersegError)
from .imagecore import TissueClass, load_image


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through our exit codes
        raise UsageError(message)


def _atomic_write(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_save(path, save_fn) -> None:
    """Run save_fn(tmp_path) then rename into place."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    os.close(fd)
    try:
        save_fn(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Options:
    """Flag > config > default resolution for one subcommand."""

    def __init__(self, args: argparse.Namespace, command: str):
        self.args = args
        self.section = {}
        config_path = getattr(args, "config", None)
        if config_path:
            parser = configparser.ConfigParser()
            if not parser.read(config_path):
                raise DataError(f"config file {config_path!r} not found")
            if parser.has_section(command):
                self.section = dict(parser.items(command))

    def get(self, key: str, default=None, cast=None):
        value = getattr(self.args, key.replace("-", "_"), None)
        if value is None and key in self.section:
            value = self.section[key]
        if value is None:
            return default
        if cast is bool and isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise UsageError(f"invalid boolean for {key}: {value!r}")
        if cast is not None and not isinstance(value, bool):
            try:
                return cast(value)
            except (TypeError, ValueError):
                raise UsageError(f"invalid value for {key}: {value!r}") from None
        return value


def _slic_params(opts: _Options) -> slic.SlicParams:
    return slic.SlicParams(
        target_size=opts.get("target-size", 550, int),
        compactness=opts.get("compactness", 10.0, float),
        max_iters=opts.get("max-iters", 10, int),
        connectivity_min_frac=opts.get("connectivity-min-frac", 0.25, float),
    )


def _train_config(opts: _Options) -> neural.TrainConfig:
    return neural.TrainConfig(
        learning_rate=opts.get("learning-rate", 0.001, float),
        momentum=opts.get("momentum", 0.88, float),
        batch_size=opts.get("batch-size", 24, int),
        max_epochs=opts.get("max-epochs", 200, int),
        patience=opts.get("patience", 50, int),
        seed=opts.get("seed", 0, int),
    )


def _parse_backbone(text: str) -> tuple:
    layers = []
    for token in text.split(","):
        token = token.strip().lower()
        if token.startswith("conv:"):
            layers.append(("conv", int(token.split(":", 1)[1])))
        elif token == "relu":
            layers.append(("relu",))
        elif token == "maxpool":
            layers.append(("maxpool",))
        elif token:
            raise UsageError(f"unknown backbone layer {token!r}")
    return tuple(layers)


def _network_spec(opts: _Options) -> neural.NetworkSpec:
    backbone = opts.get("backbone", None)
    kwargs = {}
    if backbone:
        kwargs["backbone"] = _parse_backbone(backbone)
    return neural.NetworkSpec(
        input_size=opts.get("patch-size", 32, int),
        head_width=opts.get("head-width", 512, int),
        **kwargs,
    )


# ---------------------------------------------------------------------------
# subcommands


def _cmd_slic(opts: _Options) -> int:
    image = load_image(opts.get("image"))
    part = slic.partition(image, _slic_params(opts))
    out = opts.get("output")
    _atomic_save(out, lambda tmp: slic.save_partition_png(part, tmp))
    print(f"wrote {out}: {part.count} superpixels over {part.width}x{part.height}")
    return 0


def _cmd_extract(opts: _Options) -> int:
    manifest = dataset.load_manifest(opts.get("dataset"))
    descriptor = mpeg7.normalize_kind(opts.get("descriptor"))
    patch_size = opts.get("patch-size", 32, int)
    rows = list(dataset.extract_features(manifest, descriptor, patch_size))
    out = opts.get("output")
    dim = mpeg7.DESCRIPTOR_DIMS[descriptor]
    _atomic_save(out, lambda tmp: mpeg7.write_features_csv(tmp, rows, dim))
    print(f"wrote {out}: {len(rows)} rows, dim {dim}")
    return 0


def _parse_criterion(text: str):
    text = text.strip().lower()
    if text.startswith("fixed:"):
        return "fixed", int(text.split(":", 1)[1])
    return pca.normalize_criterion(text), None


def _cmd_reduce(opts: _Options) -> int:
    image_ids, sp_ids, labels, feats = mpeg7.read_features_csv(opts.get("features"))
    criterion, n_components = _parse_criterion(opts.get("criterion", "kg"))
    threshold = opts.get("threshold", 0.80, float)
    model = pca.fit(feats, criterion, threshold=threshold, n_components=n_components)
    out = opts.get("output")
    _atomic_write(out, pca.to_json(model).encode())

    reduced_path = opts.get("reduced-output")
    if reduced_path is None:
        reduced_path = os.path.join(os.path.dirname(os.path.abspath(out)) or ".",
                                    "reduced.csv")
    reduced = pca.transform_matrix(model, feats)
    rows = [(img, sp, lbl, reduced[i])
            for i, (img, sp, lbl) in enumerate(zip(image_ids, sp_ids, labels))]
    _atomic_save(reduced_path,
                 lambda tmp: mpeg7.write_features_csv(tmp, rows, model.retained))
    print(f"wrote {out} (retained {model.retained}/{model.dim}, criterion "
          f"{model.criterion}) and {reduced_path}")
    return 0


def _cmd_train(opts: _Options) -> int:
    family = opts.get("model")
    source = opts.get("source")
    out = opts.get("output")
    seed = opts.get("seed", 0, int)
    if family == "cnn":
        if not os.path.isdir(source):
            raise DataError("training a cnn requires a dataset directory")
        manifest = dataset.load_manifest(source)
        spec = _network_spec(opts)
        config = _train_config(opts)
        patches, labels, _ = dataset.labeled_patch_list(manifest, spec.input_size)
        pairs = list(zip(patches, labels))
        if opts.get("augment", False, bool):
            from . import augment as aug
            policy = aug.AugmentPolicy(
                variants_per_instance=opts.get("variants", 3, int), seed=config.seed)
            pairs = list(aug.augment_stream(pairs, policy))
        val_frac = opts.get("val-fraction", 0.15, float)
        rng = np.random.default_rng(config.seed)
        held = classifiers.stratified_holdout(
            np.asarray([int(l) for _, l in pairs]), val_frac, rng)
        train_pairs = [p for p, h in zip(pairs, held) if not h] or pairs
        val_pairs = [p for p, h in zip(pairs, held) if h] or pairs
        model = neural.train(spec, config, train_pairs, val_pairs)
        _atomic_save(out, lambda tmp: neural.save_network(model, tmp))
        print(f"wrote {out}: cnn trained on {len(train_pairs)} patches, "
              f"{len(model.history)} epochs")
    else:
        if os.path.isdir(source):
            raise DataError("train classic models from a features CSV "
                            "(run `extract`/`reduce` first)")
        _, _, labels, feats = mpeg7.read_features_csv(source)
        data = classifiers.TrainingSet(feats, labels)
        hyper = {}
        if family == "rf":
            hyper["n_trees"] = opts.get("trees", 10, int)
        model = classifiers.train(data, family, seed=seed, **hyper)
        _atomic_write(out, classifiers.to_json(model).encode())
        print(f"wrote {out}: {model.family} on {feats.shape[0]} rows")
    return 0


def _load_predictor(opts: _Options):
    model_path = opts.get("model")
    with open(model_path, "rb") as fh:
        head = fh.read(4)
    if head == b"USNN":
        return pipeline.PatchNetwork(neural.load_network(model_path))
    model = classifiers.load(model_path)
    descriptor = opts.get("descriptor")
    if descriptor is None:
        raise UsageError("classic models need --descriptor {cld|csd|scd}")
    pca_path = opts.get("pca-model")
    pca_model = pca.load(pca_path) if pca_path else None
    return pipeline.DescriptorClassifier(model, descriptor, pca_model,
                                         patch_size=opts.get("patch-size", 32, int))


def _cmd_segment(opts: _Options) -> int:
    image = load_image(opts.get("image"))
    predictor = _load_predictor(opts)
    result = pipeline.segment_image(image, predictor, _slic_params(opts))
    out = opts.get("output")
    _atomic_save(out, lambda tmp: pipeline.save_mask_png(result.fused_mask, tmp))
    report_path = opts.get("report")
    report = pipeline.quantify_areas(result)
    if report_path:
        _atomic_write(report_path, report.to_json().encode())
    print(f"wrote {out}: wound ratio {report.wound_ratio:.4f} "
          f"({report.wound_pixels}/{report.total_pixels} px)")
    return 0


def _make_classic_trainer(family: str, pca_criterion, pca_threshold, pca_k):
    def trainer(train_x, train_y, fold_seed):
        feats = np.asarray(train_x, dtype=np.float64)
        model_pca = None
        if pca_criterion is not None:
            model_pca = pca.fit(feats, pca_criterion, threshold=pca_threshold,
                                n_components=pca_k)
            feats = pca.transform_matrix(model_pca, feats)
        model = classifiers.train(classifiers.TrainingSet(feats, train_y),
                                  family, seed=fold_seed)

        def predict_fn(test_x):
            test = np.asarray(test_x, dtype=np.float64)
            if model_pca is not None:
                test = pca.transform_matrix(model_pca, test)
            labels, scores = classifiers.predict_many(model, test)
            return labels, scores, model.classes

        return predict_fn

    return trainer


def _make_cnn_trainer(spec: neural.NetworkSpec, config: neural.TrainConfig):
    def trainer(train_patches, train_y, fold_seed):
        cfg = neural.TrainConfig(**{**config.to_dict(), "seed": fold_seed})
        held = classifiers.stratified_holdout(
            np.asarray(train_y), 0.15, np.random.default_rng(fold_seed))
        pairs = list(zip(train_patches, train_y))
        train_pairs = [p for p, h in zip(pairs, held) if not h] or pairs
        val_pairs = [p for p, h in zip(pairs, held) if h] or pairs
        model = neural.train(spec, cfg, train_pairs, val_pairs)

        def predict_fn(test_patches):
            x = neural.patches_to_array(test_patches)
            labels, scores = model.predict_batch(x)
            return labels, scores, np.arange(len(TissueClass))

        return predict_fn

    return trainer


def _cmd_evaluate(opts: _Options) -> int:
    manifest = dataset.load_manifest(opts.get("dataset"))
    family = opts.get("model-spec")
    folds = opts.get("folds", 10, int)
    seed = opts.get("seed", 0, int)
    loio = opts.get("loio", False, bool)
    patch_size = opts.get("patch-size", 32, int)

    if family == "cnn":
        spec = _network_spec(opts)
        patches, labels, groups = dataset.labeled_patch_list(manifest, spec.input_size)
        trainer = _make_cnn_trainer(spec, _train_config(opts))
        data, y = patches, labels
    else:
        descriptor = opts.get("descriptor")
        if descriptor is None:
            raise UsageError("classic models need --descriptor {cld|csd|scd}")
        rows = list(dataset.extract_features(manifest, descriptor, patch_size))
        y = np.asarray([r[2] for r in rows], dtype=np.int64)
        data = np.stack([r[3] for r in rows])
        groups = [r[0] for r in rows]
        pca_choice = opts.get("pca", "none")
        criterion = threshold = n_k = None
        if pca_choice and pca_choice != "none":
            criterion, n_k = _parse_criterion(pca_choice)
            threshold = opts.get("threshold", 0.80, float)
        trainer = _make_classic_trainer(classifiers.normalize_family(family),
                                        criterion, threshold, n_k)

    report = evaluation.cross_validate(data, y, trainer, folds=folds, seed=seed,
                                       groups=groups, leave_one_group_out=loio)
    out = opts.get("output")
    _atomic_write(out, report.to_json().encode())
    rounds = len(report.fold_reports)
    print(f"wrote {out}: {rounds} {'rounds' if loio else 'folds'}, "
          f"mean kappa {report.mean['kappa']:.4f}, mean AUC {report.mean['auc']:.4f}")
    return 0


def _cmd_ranktest(opts: _Options) -> int:
    path = opts.get("matrix")
    try:
        with open(path) as fh:
            lines = [l.strip() for l in fh if l.strip()]
    except FileNotFoundError:
        raise DataError(f"{path}: not found") from None
    if len(lines) < 2:
        raise DataError(f"{path}: need a header plus at least two data rows")
    header = [c.strip() for c in lines[0].split(",")]
    rows = [[c.strip() for c in line.split(",")] for line in lines[1:]]
    # a non-numeric first column holds dataset ids
    has_ids = False
    try:
        float(rows[0][0])
    except ValueError:
        has_ids = True
    names = header[1:] if has_ids else header
    try:
        matrix = np.asarray([[float(v) for v in (r[1:] if has_ids else r)] for r in rows])
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric measurement ({exc})") from exc

    report = evaluation.friedman_nemenyi(matrix, alpha=opts.get("alpha", 0.01, float),
                                         method_names=names)
    out = opts.get("output")
    _atomic_write(out, report.to_json().encode())
    print(f"wrote {out}: statistic {report.statistic:.6g}, p {report.p_value:.6g}")
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def _build_parser() -> _Parser:
    parser = _Parser(prog="ulcerseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="INI config file ([subcommand] sections)")

    p = sub.add_parser("slic", help="partition an image into superpixels")
    p.add_argument("image")
    p.add_argument("--target-size", type=int, dest="target_size")
    p.add_argument("--compactness", type=float)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--connectivity-min-frac", type=float, dest="connectivity_min_frac")
    p.add_argument("-o", "--output", required=True)
    common(p)

    p = sub.add_parser("extract", help="dump MPEG-7 descriptors of labeled superpixels")
    p.add_argument("dataset")
    p.add_argument("--descriptor", choices=("cld", "csd", "scd"), required=True)
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("-o", "--output", required=True)
    common(p)

    p = sub.add_parser("reduce", help="fit a PCA reduction over a feature CSV")
    p.add_argument("features")
    p.add_argument("--criterion", help="kg, sp or fixed:K")
    p.add_argument("--threshold", type=float)
    p.add_argument("--reduced-output", dest="reduced_output")
    p.add_argument("-o", "--output", required=True)
    common(p)

    p = sub.add_parser("train", help="train a classifier or the cnn")
    p.add_argument("source", help="dataset directory (cnn) or features CSV (classic)")
    p.add_argument("--model", choices=("rf", "knn-l1", "knn-l2", "gnb", "mlp", "cnn"),
                   required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--trees", type=int)
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--head-width", type=int, dest="head_width")
    p.add_argument("--backbone", help="e.g. conv:8,relu,maxpool,conv:16,relu,maxpool")
    p.add_argument("--val-fraction", type=float, dest="val_fraction")
    p.add_argument("--augment", action="store_const", const=True, default=None)
    p.add_argument("--variants", type=int)
    p.add_argument("-o", "--output", required=True)
    common(p)

    p = sub.add_parser("segment", help="segment an image and quantify tissue areas")
    p.add_argument("image")
    p.add_argument("--model", required=True)
    p.add_argument("--descriptor", choices=("cld", "csd", "scd"))
    p.add_argument("--pca-model", dest="pca_model")
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--target-size", type=int, dest="target_size")
    p.add_argument("--compactness", type=float)
    p.add_argument("--max-iters", type=int, dest="max_iters")
    p.add_argument("--connectivity-min-frac", type=float, dest="connectivity_min_frac")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--report")
    common(p)

    p = sub.add_parser("evaluate", help="cross-validate a model spec over a dataset")
    p.add_argument("dataset")
    p.add_argument("--model-spec", dest="model_spec", required=True,
                   choices=("rf", "knn-l1", "knn-l2", "gnb", "mlp", "cnn"))
    p.add_argument("--descriptor", choices=("cld", "csd", "scd"))
    p.add_argument("--pca", help="none, kg, sp or fixed:K")
    p.add_argument("--threshold", type=float)
    p.add_argument("--folds", type=int)
    p.add_argument("--loio", action="store_const", const=True, default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--patch-size", type=int, dest="patch_size")
    p.add_argument("--head-width", type=int, dest="head_width")
    p.add_argument("--backbone")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--momentum", type=float)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("-o", "--output", required=True)
    common(p)

    p = sub.add_parser("ranktest", help="Friedman + Nemenyi over a results matrix")
    p.add_argument("matrix", help="CSV, one column per method, one row per dataset")
    p.add_argument("--alpha", type=float)
    p.add_argument("-o", "--output", required=True)
    common(p)

    return parser


_COMMANDS = {
    "slic": _cmd_slic,
    "extract": _cmd_extract,
    "reduce": _cmd_reduce,
    "train": _cmd_train,
    "segment": _cmd_segment,
    "evaluate": _cmd_evaluate,
    "ranktest": _cmd_ranktest,
}


def run_command(argv) -> int:
    """Run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        opts = _Options(args, args.command)
        return _COMMANDS[args.command](opts)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, MaeUndefinedError) as exc:
        print(f"error: training: {exc}", file=sys.stderr)
        return 4
    except (DataError, NotFoundError, ConfigurationError, InvalidArgumentError) as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3
    except UlcersegError as exc:
        print(f"error: data: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
