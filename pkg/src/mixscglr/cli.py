"""Command-line front end.

Usage::

    mixscglr [-v] COMMAND [--config FILE] [--KEY VALUE ...]

Commands are ``fit``, ``cv``, ``simulate``, ``export-plot`` and ``predict``.
Every configuration key (see :mod:`mixscglr.io`) is also a flag and flags
override the file.  Exit status: 0 success, 1 user error, 2 numerical
failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import fields

import numpy as np

from . import io
from .core import extract_components, fit_fixed_scglr, group_indices, predict
from .exceptions import DataError, NumericalError, ScglrError
from .tuning import SimDesign, grid_search, make_folds, simulate
from .tuning.cv import default_jobs

log = logging.getLogger("mixscglr")

EXIT_OK, EXIT_USER, EXIT_NUMERIC = 0, 1, 2


def build_parser():
    parser = argparse.ArgumentParser(prog="mixscglr", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in io.COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--print-config", action="store_true", help="print the resolved configuration and exit")
        for f in fields(io.RunConfig):
            if f.name == "command":
                continue
            p.add_argument(f"--{f.name.replace('_', '-')}", dest=f"opt_{f.name}", metavar="VALUE")
    return parser


def resolve_config(args):
    cfg = io.read_config(args.config) if args.config else io.RunConfig()
    cfg.command = args.command
    for f in fields(io.RunConfig):
        raw = getattr(args, f"opt_{f.name}", None)
        if raw is not None:
            setattr(cfg, f.name, io.parse_value(f.name, raw))
    return cfg.validate()


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def run_fit(cfg):
    data = io.ingest(cfg)
    hp = cfg.hyperparams()
    model = extract_components(data, hp) if cfg.mixed else fit_fixed_scglr(data, hp)
    with io.OutputSet(cfg.out) as out:
        io.save_model(model, out.path("model.json"))
        rows = []
        for k, name in enumerate(model.y_names):
            rows.append((name, "(intercept)", model.intercept_raw[k]))
            rows.extend((name, x, b) for x, b in zip(model.x_names, model.beta_raw[k]))
            extra = model.delta[k, 1:] if model.intercept else model.delta[k]
            rows.extend((name, a, d) for a, d in zip(model.a_names, extra))
        io.write_table(out.path("coefficients.csv"), ["response", "term", "estimate"], rows)
        io.write_table(out.path("variance_components.csv"), ["response", "sigma2", "dispersion"],
                       zip(model.y_names, model.sigma2, model.dispersion))
        trials = {k: f.trials for k, f in enumerate(data.families) if f.kind == "binomial"}
        fitted = predict(model, data.X_raw, data.A_extra, data.groups.group_of, "conditional", trials)
        io.write_matrix(out.path("fitted.csv"), model.y_names, fitted)
        if model.K >= 2:
            plot = io.export_plot_data(model, tuple(cfg.plane), cfg.cos_threshold)
            prefix = out.path("plot")
            out.paths.remove(prefix)
            out.paths.extend(io.write_plot_data(plot, prefix))
    status = "converged" if model.converged else "NOT converged"
    print(f"fit: K={model.K} s={cfg.s} l={cfg.l} ({status}); outputs in {cfg.out}")
    return EXIT_OK


def run_cv(cfg):
    data = io.ingest(cfg)
    plan = make_folds(data.groups, cfg.holdout, cfg.folds, cfg.seed)
    jobs = cfg.jobs if cfg.jobs is not None else default_jobs()
    res = grid_search(data, cfg.K_set, cfg.s_set, cfg.l_set, plan, cfg.hyperparams(),
                      standardised=cfg.standardised_errors, mixed=cfg.mixed, jobs=jobs)
    with io.OutputSet(cfg.out) as out:
        header = ["s", "l", "K", "E"] + [f"E_{y}" for y in data.y_names] + ["folds_used"]
        rows = [[c["s"], c["l"], c["K"], c["E"], *c["E_k"], c["folds_used"]] for c in res.surface]
        io.write_table(out.path("cv_surface.csv"), header, rows)
        with open(out.path("cv_summary.json"), "w", encoding="utf-8") as fh:
            json.dump({"K": res.K, "s": res.s, "l": res.l, "E": res.E}, fh, indent=1, sort_keys=True)
            fh.write("\n")
    print(f"cv: K*={res.K} s*={res.s} l*={res.l} E={res.E:.6g}; outputs in {cfg.out}")
    return EXIT_OK


def run_simulate(cfg):
    design = SimDesign(cfg.design, N=cfg.N, R=cfg.R, tau=cfg.tau, stn=cfg.stn, p=cfg.p, seed=cfg.seed)
    data, truths = simulate(design)
    with io.OutputSet(cfg.out) as out:
        header = ["group"] + list(data.y_names)
        cols = [data.groups.group_of.astype(int)] + [data.Y[:, k] for k in range(data.q)]
        families = []
        for k, fam in enumerate(data.families):
            entry = [data.y_names[k], fam.kind]
            if fam.kind == "binomial":
                header.append(f"trials_{data.y_names[k]}")
                cols.append(fam.trials)
                entry.append(header[-1])
            families.append(tuple(entry) + (None,) * (3 - len(entry)))
        rows = [[int(r[0])] + [float(v) for v in r[1:]] for r in zip(*cols)]
        resp_path = out.path("responses.csv")
        x_path = out.path("X.csv")
        io.write_table(resp_path, header, rows)
        io.write_matrix(x_path, data.x_names, data.X_raw)
        with open(out.path("truths.json"), "w", encoding="utf-8") as fh:
            json.dump(_jsonable(truths), fh, indent=1, sort_keys=True)
            fh.write("\n")
        fit_cfg = io.RunConfig(command="fit", responses=resp_path, x=x_path, groups="group",
                               families=families, seed=cfg.seed, out=cfg.out)
        with open(out.path("run.cfg"), "w", encoding="utf-8") as fh:
            fh.write(io.serialise_config(fit_cfg))
    print(f"simulate: {cfg.design} n={data.n} p={data.p} q={data.q}; outputs in {cfg.out}")
    return EXIT_OK


def run_export_plot(cfg):
    if not cfg.model:
        raise DataError("export-plot needs 'model' (a model.json written by fit)")
    model = io.load_model(cfg.model)
    plot = io.export_plot_data(model, tuple(cfg.plane), cfg.cos_threshold)
    with io.OutputSet(cfg.out) as out:
        prefix = f"{out.directory}/plot"
        out.paths.extend(io.write_plot_data(plot, prefix))
    print(f"export-plot: plane {tuple(cfg.plane)}; outputs in {cfg.out}")
    return EXIT_OK


def run_predict(cfg):
    if not cfg.model or not cfg.x:
        raise DataError("predict needs 'model' and 'x'")
    model = io.load_model(cfg.model)
    xt = io.read_table(cfg.x)
    if xt.header != list(model.x_names):
        raise DataError(f"{cfg.x}: columns {xt.header} do not match the model's {model.x_names}")
    X = xt.numeric()
    A = io.read_table(cfg.a).numeric() if cfg.a else None
    groups = None
    trials = {}
    if cfg.responses:
        resp = io.read_table(cfg.responses)
        if cfg.mode == "conditional":
            if not cfg.groups:
                raise DataError("conditional prediction needs the 'groups' column name")
            groups = group_indices(model, resp.column(cfg.groups))
        declared = {col: tc for col, kind, tc in cfg.families if kind == "binomial"}
        for k, name in enumerate(model.y_names):
            if name in declared:
                trials[k] = resp.numeric([declared[name]])[:, 0]
    elif cfg.mode == "conditional":
        raise DataError("conditional prediction needs a responses file with the group column; "
                        "use --mode marginal otherwise")
    mu = predict(model, X, A, groups, cfg.mode, trials)
    with io.OutputSet(cfg.out) as out:
        io.write_matrix(out.path("predictions.csv"), model.y_names, mu)
    print(f"predict: {mu.shape[0]} rows ({cfg.mode}); outputs in {cfg.out}")
    return EXIT_OK


COMMAND_FUNCS = {
    "fit": run_fit,
    "cv": run_cv,
    "simulate": run_simulate,
    "export-plot": run_export_plot,
    "predict": run_predict,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        if args.print_config:
            sys.stdout.write(io.serialise_config(cfg))
            return EXIT_OK
        return COMMAND_FUNCS[cfg.command](cfg)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except (NumericalError, ScglrError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
