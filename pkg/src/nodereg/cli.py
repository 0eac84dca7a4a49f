"""Command line front end.

::

    nodereg synth --spec suite.cfg --out cases/
    nodereg register --fixed f.nii --moving m.nii --metric mind --config reg.cfg --out run/
    nodereg train-descriptor --corpus images/ --config cl.cfg --out descriptor.ckpt
    nodereg eval --result run/ --truth cases/case_000
    nodereg sweep-eps --case cases/case_000 --values 0.1,0.3,0.5

Bad arguments or unreadable inputs exit with status 1 and a one-line
diagnostic on stderr; non-finite losses exit with status 2.
"""

import argparse
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .contrastive import ContrastiveConfig, ContrastiveDescriptor, descriptor_from_params
from .evaluation import dice, endpoint_error, neg_jac_ratio, wilcoxon_signed_rank
from .flow import FlowConfig
from .grid import identity_grid, sample_nearest
from .io import (ConfigError, NiftiError, RawFormatError, config_schema, csv_text, read_config,
                 read_nifti, read_volume, write_csv, write_loss_trace, write_nifti,
                 write_report, write_slice_snapshot)
from .neural import load_params, save_params
from .objective import METRICS, LossConfig, NeuralODERegistration, NumericalError
from .spectral import KernelSpec
from .synth import SynthSpec, load_case, make_pair, save_case

# estimator settings that are not fields of the config dataclasses
_EXTRA_KEYS = {"width": int, "radius": int, "dilation": int, "bins": int,
               "patch_side": int, "bandwidth": float, "seed": int}
_TRAIN_KEYS = {"widths": lambda s: tuple(int(x) for x in s.replace(",", " ").split()),
               "seed": int}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def register_schema():
    schema = config_schema(LossConfig, FlowConfig, KernelSpec, ContrastiveConfig)
    schema.update(_EXTRA_KEYS)
    return schema


def _estimator_kwargs(values):
    """Keep the keys :class:`NeuralODERegistration` understands."""
    accepted = NeuralODERegistration().get_params()
    return {k: v for k, v in values.items() if k in accepted}


def _load_config(path, schema):
    return read_config(path, schema) if path else {}


def _read_labels(path):
    return None if path is None else np.asarray(read_nifti(path)[0]).astype(np.int32)


def _load_descriptor(path):
    params = load_params(path)
    return descriptor_from_params(params), params


def _run_registration(fixed, moving, labels_fixed, labels_moving, metric, values, descriptor):
    kwargs = _estimator_kwargs(values)
    kwargs["metric"] = metric
    if metric == "contrastive":
        if descriptor is None:
            raise UsageError("the contrastive metric needs --descriptor")
        kwargs["descriptor"] = _load_descriptor(descriptor)
    est = NeuralODERegistration(**kwargs)
    return est.fit(moving, fixed, labels_moving, labels_fixed)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args):
    schema = config_schema(SynthSpec, exclude=())
    schema["n_cases"] = int
    values = _load_config(args.spec, schema)
    n_cases = values.pop("n_cases", 10)
    base = values.pop("seed", 0)
    out = Path(args.out)
    rows = []
    for i in range(n_cases):
        case = make_pair(SynthSpec(seed=base + i, **values))
        name = f"case_{i:03d}"
        save_case(case, out / name)
        rows.append({"case": name, "seed": base + i, "inverted": case.info["inverted"]})
    write_csv(out / "manifest.csv", ("case", "seed", "inverted"), rows)
    return 0


def cmd_register(args):
    values = _load_config(args.config, register_schema())
    metric = args.metric or values.get("metric", "mind")
    fixed = read_volume(args.fixed)
    moving = read_volume(args.moving)
    est = _run_registration(fixed, moving, _read_labels(args.labels_fixed),
                            _read_labels(args.labels_moving), metric, values, args.descriptor)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(out / "phi.nii", est.phi_, vector=True)
    write_nifti(out / "phi_inv.nii", est.phi_inv_, vector=True)
    write_nifti(out / "warped.nii", est.warped_)
    if args.labels_moving is not None:
        write_nifti(out / "warped_labels.nii",
                    est.transform_labels(_read_labels(args.labels_moving)), label=True)
    save_params(est.params_, out / "velocity_net.params")
    write_loss_trace(out / "loss.csv", est.loss_trace_)
    write_report(out / "report.csv", est.report_)
    # wall-clock time lives apart from the report so reports stay reproducible
    write_csv(out / "timing.csv", ("metric", "value"), [("elapsed_seconds", est.elapsed_)])
    for name, vol in (("fixed", fixed), ("moving", moving), ("warped", est.warped_)):
        write_slice_snapshot(vol, args.axis, out / f"{name}.pgm")
    return 0


def _corpus_files(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise UsageError(f"corpus directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix in (".nii", ".drv"))
    if not files:
        # a synth output directory: use the moving images of its cases
        files = sorted(directory.glob("case_*/moving.nii"))
    if not files:
        raise UsageError(f"no .nii or .drv images in {directory}")
    return files


def cmd_train_descriptor(args):
    schema = config_schema(ContrastiveConfig)
    schema.update(_TRAIN_KEYS)
    values = _load_config(args.config, schema)
    cfg = ContrastiveConfig(**{f.name: values[f.name] for f in fields(ContrastiveConfig)
                               if f.name in values})
    corpus = [read_volume(p) for p in _corpus_files(args.corpus)]
    est = ContrastiveDescriptor(cfg.tau, cfg.N_k, cfg.p, cfg.n, cfg.descriptor_lr,
                                cfg.iterations, values.get("widths", (16, 32, 64)),
                                seed=values.get("seed", 0))
    try:
        est.fit(corpus)
    except FloatingPointError as exc:
        raise NumericalError(str(exc)) from None
    save_params(est.params_, args.out)
    if args.loss_csv:
        write_csv(args.loss_csv, ("iteration", "loss"), enumerate(est.loss_curve_))
    return 0


def evaluate_result(result_dir, truth_dir):
    """Endpoint error, Dice and folding of a ``register`` output against a case."""
    case = load_case(truth_dir)
    phi = read_nifti(Path(result_dir) / "phi.nii")[0].astype(np.float64)
    ident = identity_grid(phi.shape[1:])
    warped = sample_nearest(case.labels_moving, phi)
    return {
        "epe_identity": endpoint_error(ident, case.phi_gt)[0],
        "epe": endpoint_error(phi, case.phi_gt)[0],
        "dice_identity": dice(case.labels_moving, case.labels_fixed)[1],
        "dice": dice(warped, case.labels_fixed)[1],
        "neg_jac_percent": neg_jac_ratio(phi),
    }


EVAL_COLUMNS = ("result", "epe_identity", "epe", "dice_identity", "dice", "neg_jac_percent")


def cmd_eval(args):
    if len(args.result) != len(args.truth):
        raise UsageError("--result and --truth need the same number of directories")
    rows = []
    for res, truth in zip(args.result, args.truth):
        rows.append({"result": res, **evaluate_result(res, truth)})
    if args.baseline:
        if len(args.baseline) != len(args.result):
            raise UsageError("--baseline needs one directory per --result")
        base = [evaluate_result(b, t)["dice"] for b, t in zip(args.baseline, args.truth)]
        p = wilcoxon_signed_rank([r["dice"] for r in rows], base, alternative="greater")
        rows.append({"result": "wilcoxon_p_dice_greater",
                     **{c: p if c == "dice" else "" for c in EVAL_COLUMNS[1:]}})
    _emit(args.out, EVAL_COLUMNS, rows)
    return 0


def _emit(path, columns, rows):
    if path:
        write_csv(path, columns, rows)
    else:
        sys.stdout.write(csv_text(columns, rows))


SWEEP_COLUMNS = ("epsilon", "mean_dice", "neg_jac_percent")


def sweep_epsilon(cases, epsilons, metric="mind", values=None, descriptor=None):
    """Mean Dice and mean %negJac over ``cases`` for each threshold."""
    values = dict(values or {})
    rows = []
    for eps in epsilons:
        values["epsilon"] = eps
        dices, negs = [], []
        for case in cases:
            est = _run_registration(case.fixed, case.moving, case.labels_fixed,
                                    case.labels_moving, metric, values, descriptor)
            dices.append(est.report_["mean_dice"])
            negs.append(est.report_["neg_jac_percent"])
        rows.append({"epsilon": eps, "mean_dice": float(np.mean(dices)),
                     "neg_jac_percent": float(np.mean(negs))})
    return rows


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse --values {text!r}") from None


def cmd_sweep_eps(args):
    values = _load_config(args.config, register_schema())
    metric = args.metric or values.get("metric", "mind")
    cases = [load_case(c) for c in args.case]
    rows = sweep_epsilon(cases, _float_list(args.values), metric, values, args.descriptor)
    _emit(args.out, SWEEP_COLUMNS, rows)
    return 0


def build_parser():
    parser = _Parser(prog="nodereg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write synthetic benchmark cases")
    p.add_argument("--spec", help="synthetic suite config (SynthSpec fields, n_cases)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register one pair")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--labels-fixed")
    p.add_argument("--labels-moving")
    p.add_argument("--metric", choices=METRICS)
    p.add_argument("--config")
    p.add_argument("--descriptor", help="descriptor checkpoint for the contrastive metric")
    p.add_argument("--axis", type=int, default=1, help="snapshot slice axis for 3-D volumes")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("train-descriptor", help="train the contrastive descriptor")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--loss-csv")
    p.set_defaults(func=cmd_train_descriptor)

    p = sub.add_parser("eval", help="score register outputs against synthetic truth")
    p.add_argument("--result", nargs="+", required=True)
    p.add_argument("--truth", nargs="+", required=True)
    p.add_argument("--baseline", nargs="+", help="second result set for a signed-rank test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-eps", help="Jacobian threshold sweep")
    p.add_argument("--case", nargs="+", required=True)
    p.add_argument("--values", default="0.1,0.3,0.5")
    p.add_argument("--metric", choices=METRICS)
    p.add_argument("--config")
    p.add_argument("--descriptor")
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep_eps)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except NumericalError as exc:
        print(f"nodereg: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, ConfigError, NiftiError, RawFormatError, ValueError, OSError) as exc:
        print(f"nodereg: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
