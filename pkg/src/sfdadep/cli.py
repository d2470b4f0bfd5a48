"""Command-line front end: ``sfdadep {gen,train-source,adapt,eval,report}``.

Layout of an experiment directory (``--out``)::

    config.resolved.txt
    data/source/                   manifest.txt + pixmaps
    data/target-<name>/
    source/params.bin              source/train.csv, source/metrics.csv
    adapt/<method>-<target>/       params.bin, record.csv, summary.csv,
                                   run.txt, partitions/*.txt
    eval/<tag>/                    metrics.csv, metrics.txt, maps/*.pgm

Exit codes: 0 success, 2 configuration error, 3 missing or corrupt input,
4 numerical divergence, 1 anything else.
"""
from __future__ import annotations

import argparse
import csv
import io
import shutil
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import pnm
from .adapt import DivergenceError, adapt_dep, adapt_selftrain, strip_labels, train_source, write_record
from .metrics import evaluate, format_table, make_evaluator, reports_to_csv, reports_to_table, score_maps
from .model import embed_batch, init_params, load_params, pooled, predict_pooled, save_params
from .partition import predict_all
from .synthbench import ManifestError, generate_dataset, load_dataset, save_dataset

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_DIVERGED = 4


class CliError(Exception):
    def __init__(self, code, kind, message):
        super().__init__(message)
        self.code = code
        self.kind = kind


def _missing(msg):
    return CliError(EXIT_INPUT, "missing-input", msg)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")


def _load_config(args):
    try:
        cfg = cfgmod.load(args.config, seed=args.seed, out=args.out, method=getattr(args, "method", None))
    except FileNotFoundError as exc:
        raise _missing(str(exc)) from None
    except cfgmod.ConfigError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from None
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.resolved.txt", cfg.resolved_text())
    return cfg, out


def _load_data(directory):
    try:
        return load_dataset(directory)
    except FileNotFoundError as exc:
        raise _missing(f"{exc} (run 'sfdadep gen' first)") from None
    except (ManifestError, ValueError, KeyError) as exc:
        raise CliError(EXIT_INPUT, "corrupt-input", str(exc)) from None


def _load_params(path):
    path = Path(path)
    if not path.is_file():
        raise _missing(f"params file {path} not found")
    try:
        return load_params(path)
    except ValueError as exc:
        raise CliError(EXIT_INPUT, "corrupt-input", str(exc)) from None


def _domains(cfg):
    doms = {"source": cfg.source_domain()}
    for name, dc in cfg.target_domains().items():
        doms[f"target-{name}"] = dc
    return doms


# -- commands ----------------------------------------------------------------


def cmd_gen(args):
    cfg, out = _load_config(args)
    data = out / "data"
    if data.exists() and any(data.iterdir()):
        if not args.overwrite:
            raise CliError(EXIT_CONFIG, "config", f"{data} is not empty; pass --overwrite to replace it")
        shutil.rmtree(data)
    for name, (spec, counts) in _domains(cfg).items():
        ds = generate_dataset(spec, counts, cfg.k)
        save_dataset(ds, data / name)
        sizes = ", ".join(f"{s}={n}" for s, n in ds.counts().items())
        print(f"{name}: {sizes}")
    return EXIT_OK


def cmd_train_source(args):
    cfg, out = _load_config(args)
    src = _load_data(out / "data" / "source")
    if src.k != cfg.k:
        raise CliError(EXIT_CONFIG, "config", f"dataset has k={src.k}, config has k={cfg.k}")
    spec, _ = cfg.source_domain()
    params = init_params(channels=spec.channels, height=spec.height, width=spec.width, k=cfg.k, **cfg.model_kwargs())
    history = []
    params = train_source(src["train"], cfg.source_config(), params, history)
    save_params(params, out / "source" / "params.bin")
    _write(out / "source" / "train.csv",
           _csv_text(["phase", "epoch", "loss"], [(ph, ep, repr(v)) for ph, ep, v in history]))
    reports = []
    for split in ("val_cl", "test"):
        if len(src[split]):
            z = embed_batch(params, np.stack([s.pixels for s in src[split]]))
            _, pred, _ = predict_pooled(params, pooled(z))
            acc = float(np.mean(pred == np.array([s.label for s in src[split]])))
            print(f"source {split} CL = {acc:.4f}")
            if any(s.mask.any() for s in src[split]):
                reports.append(evaluate(params, src[split], use_pixel_head=False, domain=f"source-{split}"))
    if reports:
        _write(out / "source" / "metrics.csv", reports_to_csv(reports))
    return EXIT_OK


def _run_dir(out, method, target):
    return out / "adapt" / f"{method}-{target}"


def cmd_adapt(args):
    cfg, out = _load_config(args)
    method = cfg.method
    source_params_path = out / "source" / "params.bin"
    params = _load_params(source_params_path)
    acfg = cfg.adapt_config()
    for name in cfg.target_domains():
        tgt = _load_data(out / "data" / f"target-{name}")
        view = strip_labels(tgt["train"])
        if len(view) == 0:
            raise _missing(f"target {name} has an empty train split")
        run = _run_dir(out, method, name)
        if run.exists():
            shutil.rmtree(run)
        run.mkdir(parents=True)
        evaluator = make_evaluator(tgt["val_cl"], tgt["val_pxap"])
        if method == "none":
            shutil.copyfile(source_params_path, run / "params.bin")
            adapted, record = params, None
            _write(run / "record.csv", _csv_text(_record_header(cfg.k), []))
        else:
            fn = adapt_dep if method == "dep" else adapt_selftrain
            kw = dict(evaluator=evaluator, audit_dir=run / "partitions", strict_grid=cfg.strict_grid)
            try:
                adapted, record = fn(params, view, acfg, **kw)
            except DivergenceError as exc:
                raise CliError(EXIT_DIVERGED, "divergence", f"target {name}: {exc}") from None
            write_record(record, run, cfg.k)
        pz = pooled(embed_batch(params, view.pixels))
        init = predict_all(params, view.ids, pz).frequencies()
        final = np.asarray(record.final_class_freqs) if record is not None else init
        summary_rows = []
        report = None
        if len(tgt["test"]):
            report = evaluate(adapted, tgt["test"], use_pixel_head=method != "none", domain=f"target-{name}")
            _write(run / "metrics.csv", reports_to_csv([report]))
        dom = int(np.argmax(init))
        summary_rows.append(
            [method, name, dom, repr(float(init[dom])), repr(float(final[dom]))]
            + ([repr(report.pxap), repr(report.cl)] if report else ["nan", "nan"])
            + [repr(float(f)) for f in init] + [repr(float(f)) for f in final]
        )
        header = (["method", "target", "dominant_class", "dominant_freq_initial", "dominant_freq_final", "pxap", "cl"]
                  + [f"initial_freq_class_{c}" for c in range(cfg.k)] + [f"final_freq_class_{c}" for c in range(cfg.k)])
        _write(run / "summary.csv", _csv_text(header, summary_rows))
        _write(run / "run.txt", cfg.resolved_text() + f"run.target = {name}\n")
        print(f"{method} on {name}: dominant class {dom} frequency {init[dom]:.3f} -> {final[dom]:.3f}"
              + (f", test CL {report.cl:.4f}, PxAP {report.pxap:.4f}" if report else ""))
    return EXIT_OK


def _record_header(k):
    return (["epoch", "loss_retain", "loss_forget", "loss_loc", "loss_total"]
            + [f"freq_class_{c}" for c in range(k)] + ["val_cl", "val_pxap"])


def cmd_eval(args):
    cfg, out = _load_config(args)
    params_path = Path(args.params) if args.params else out / "source" / "params.bin"
    params = _load_params(params_path)
    source_path = out / "source" / "params.bin"
    scores = args.scores
    if scores == "auto":
        is_source = source_path.is_file() and source_path.read_bytes() == params_path.read_bytes()
        scores = "cam" if is_source else "pixel"
    tag = args.tag or params_path.parent.name
    dest = out / "eval" / tag
    domains = [args.domain] if args.domain else list(_domains(cfg))
    reports = []
    for dom in domains:
        if dom != "source" and not dom.startswith("target-"):
            dom = f"target-{dom}"
        ds = _load_data(out / "data" / dom)
        samples = ds[args.split]
        if not samples:
            continue
        maps = [s.mask.astype(float) for s in samples] if args.debug_oracle_scores else None
        reports.append(evaluate(params, samples, use_pixel_head=scores == "pixel", domain=dom, maps=maps))
        for split in ("val_pxap", "test"):
            if not ds[split]:
                continue
            z = embed_batch(params, np.stack([s.pixels for s in ds[split]]))
            _, pred, _ = predict_pooled(params, pooled(z))
            for s, m in zip(ds[split], score_maps(params, z, pred, scores == "pixel")):
                path = dest / "maps" / f"{dom}_{split}_{s.id:06d}.pgm"
                path.parent.mkdir(parents=True, exist_ok=True)
                pnm.write(path, np.round(np.clip(m, 0, 1) * 255).astype(np.uint8))
    if not reports:
        raise _missing(f"no samples in split {args.split!r}")
    _write(dest / "metrics.csv", reports_to_csv(reports))
    _write(dest / "metrics.txt", reports_to_table(reports))
    sys.stdout.write(reports_to_table(reports))
    return EXIT_OK


# -- report ------------------------------------------------------------------


def _read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CliError(EXIT_INPUT, "corrupt-input", f"{path} is empty")
    return rows[0], rows[1:]


def _read_kv(path):
    return cfgmod.parse_text(Path(path).read_text(encoding="utf-8"), str(path))


def _mean(values):
    vals = [v for v in values if not np.isnan(v)]
    return float(np.mean(vals)) if vals else float("nan")


def _grouped_curves(runs, key):
    groups = defaultdict(list)
    for r in runs:
        groups[r["settings"].get(key, "?")].append(r)
    rows = []
    for series in sorted(groups, key=_series_order):
        members = groups[series]
        n_epochs = min(len(r["record"]) for r in members)
        for e in range(n_epochs):
            vals = [[float(x) for x in r["record"][e][1:]] for r in members]
            means = [_mean(col) for col in zip(*vals)]
            rows.append([series, e, len(members)] + [repr(v) for v in means])
    header = ["series", "epoch", "n_runs"] + runs[0]["record_header"][1:] if runs else []
    return header, rows


def _series_order(v):
    try:
        return (0, float(v))
    except ValueError:
        return (1, v)


def cmd_report(args):
    if not args.run_dirs:
        raise CliError(EXIT_CONFIG, "config", "report needs at least one run directory")
    runs = []
    for d in args.run_dirs:
        d = Path(d)
        if not (d / "summary.csv").is_file() or not (d / "record.csv").is_file():
            raise _missing(f"{d} is not a completed adaptation run (summary.csv/record.csv missing)")
        sh, srows = _read_csv(d / "summary.csv")
        rh, rrows = _read_csv(d / "record.csv")
        settings = _read_kv(d / "run.txt") if (d / "run.txt").is_file() else {}
        runs.append(dict(name=d.name, summary=dict(zip(sh, srows[0])), summary_header=sh,
                         record_header=rh, record=rrows, settings=settings))
    for r in runs[1:]:
        if r["record_header"] != runs[0]["record_header"] or r["summary_header"] != runs[0]["summary_header"]:
            raise CliError(EXIT_INPUT, "incompatible-runs",
                           f"run {r['name']} has a different CSV schema than {runs[0]['name']}")
    baseline = next((r for r in runs if r["summary"]["method"] == "none"), runs[0])
    b_px, b_cl = float(baseline["summary"]["pxap"]), float(baseline["summary"]["cl"])
    cols = ["run", "method", "target", "m", "lam_loc", "PxAP", "CL", "dominant_freq", "dPxAP", "dCL"]
    table = []
    for r in runs:
        s = r["summary"]
        px, cl = float(s["pxap"]), float(s["cl"])
        table.append([
            r["name"], s["method"], s["target"],
            "-" if s["method"] == "none" else r["settings"].get("adapt.m", "?"),
            "-" if s["method"] == "none" else r["settings"].get("adapt.lam_loc", "?"),
            f"{100 * px:.2f}", f"{100 * cl:.2f}", f"{float(s['dominant_freq_final']):.4f}",
            f"{100 * (px - b_px):+.2f}", f"{100 * (cl - b_cl):+.2f}",
        ])
    out = Path(args.out or "report")
    _write(out / "comparison.csv", _csv_text(cols, table))
    _write(out / "comparison.txt", format_table(table, cols))
    curves = [[r["name"]] + row for r in runs for row in r["record"]]
    _write(out / "freq_curves.csv", _csv_text(["run"] + runs[0]["record_header"], curves))
    for key, fname in (("adapt.m", "sweep_m.csv"), ("adapt.lam_loc", "ablation_loc.csv")):
        header, rows = _grouped_curves([r for r in runs if r["summary"]["method"] != "none"], key)
        if header:
            _write(out / fname, _csv_text(header, rows))
    sys.stdout.write(format_table(table, cols))
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="sfdadep", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, method=False):
        p.add_argument("--config", help="key = value experiment file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="experiment directory (overrides config 'out')")
        if method:
            p.add_argument("--method", choices=("dep", "selftrain", "none"))

    p = sub.add_parser("gen", help="generate source and target datasets")
    common(p)
    p.add_argument("--overwrite", action="store_true", help="replace existing data")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train-source", help="train the source model")
    common(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="adapt the source model to every target")
    common(p, method=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="evaluate a params file and dump score maps")
    common(p)
    p.add_argument("--params", help="params file (default: the source model)")
    p.add_argument("--split", default="test", choices=("train", "val_cl", "val_pxap", "test"))
    p.add_argument("--domain", help="'source' or a target name (default: all)")
    p.add_argument("--scores", default="auto", choices=("auto", "cam", "pixel"))
    p.add_argument("--tag", help="name of the eval output directory")
    p.add_argument("--debug-oracle-scores", action="store_true", help="score with ground-truth masks")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge adaptation runs into comparison and plot-data CSVs")
    p.add_argument("run_dirs", nargs="*", help="adapt/<method>-<target> directories")
    p.add_argument("--out", help="report directory (default: ./report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error[{exc.kind}]: {exc}", file=sys.stderr)
        return exc.code
    except DivergenceError as exc:
        print(f"error[divergence]: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
