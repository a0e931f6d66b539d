"""Command-line runner: ``photonvit <command> [--config FILE] [--set section.key=value ...]``.

Every command writes CSV tables (and PNG figures beside them) into the
configured output directory together with ``manifest.json``, which records
the expanded configuration, the command arguments, library versions and a
SHA-256 of every output. ``photonvit replay manifest.json`` re-runs it.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical
contract violated.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import perf_model as pm
from .config import SCHEMA, ExperimentConfig, defaults, load_config, parse_config, validate
from .core_math import SeedContext
from .errors import ConfigError, NumericalContractError, ParameterError, ShapeError
from .optical_matmul import noisy_matmul, relative_error
from .photonic_device import build_lut, generate_variation_map, sample_bank_shifts

log = logging.getLogger("photonvit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


# -- output helpers -----------------------------------------------------------

def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return Path(path)


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out, command, args, cfg: ExperimentConfig, outputs):
    manifest = {
        "command": command,
        "args": args,
        "config": cfg.canonical(),
        "config_sha256": cfg.sha256(),
        "seed": cfg.seed,
        "versions": {"photonvit": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": _version("scipy"), "matplotlib": _version("matplotlib")},
        "outputs": {Path(p).name: _sha256(p) for p in sorted(outputs, key=str) if Path(p).is_file()},
    }
    path = Path(out) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _version(mod):
    try:
        return __import__(mod).__version__
    except ImportError:
        return None


def _plot(fn, *a):
    # figures are a convenience; a plotting failure must not lose the CSVs
    try:
        from . import plotting
        return getattr(plotting, fn)(*a)
    except Exception as exc:  # noqa: BLE001
        log.warning("figure %s skipped: %s", a[0], exc)
        return None


# -- commands -------------------------------------------------------------------

def cmd_simulate_matmul(cfg: ExperimentConfig, out: Path, args):
    """Per-element error statistics of the emulator against the analytic MAC variance.

    ``matmul_errors.csv`` columns: ``row, col, exact, err_mean, err_var,
    analytic_var, var_tolerance, within_3sigma``. The tolerance is three
    standard errors of the sample variance, ``3 * analytic_var * sqrt(2/(trials-1))``.
    """
    mm = cfg["matmul"]
    m, k, n, trials = mm["m"], mm["k"], mm["n"], mm["trials"]
    ctx = SeedContext(cfg.seed).child("simulate-matmul")
    rng = ctx.child("operands").generator()
    x = rng.standard_normal((m, k))
    w = rng.standard_normal((k, n))
    exact = x @ w
    noise = cfg.noise
    dev = cfg["device"]
    errs = np.empty((trials, m, n))
    for t in range(trials):
        y, _ = noisy_matmul(x, w, cfg.geometry, noise, dev["lut_bits"], ctx.child("chip", t),
                            noise_on_padding=dev["noise_on_padding"], gamma_nm=dev["gamma_nm"],
                            delta_max_nm=dev["delta_max_nm"])
        errs[t] = y - exact
    if not np.all(np.isfinite(errs)):
        raise NumericalContractError("emulator produced non-finite outputs")
    if noise.is_noiseless and dev["lut_bits"] == 32:
        rel = max(relative_error(exact + e, exact) for e in errs)
        if rel > 1e-9:
            raise NumericalContractError(f"noiseless emulation deviates by {rel:.3g} (limit 1e-9)")
    mean = errs.mean(axis=0)
    var = errs.var(axis=0, ddof=1) if trials > 1 else np.zeros((m, n))
    analytic = (x * x) @ (w * w) * noise.total_variance
    tol = 3.0 * analytic * np.sqrt(2.0 / max(trials - 1, 1))
    within = np.abs(var - analytic) <= tol
    path = write_csv(out / "matmul_errors.csv",
                     ["row", "col", "exact", "err_mean", "err_var", "analytic_var", "var_tolerance", "within_3sigma"],
                     ((i, j, exact[i, j], mean[i, j], var[i, j], analytic[i, j], tol[i, j], within[i, j])
                      for i in range(m) for j in range(n)))
    summary = write_csv(out / "matmul_summary.csv", ["quantity", "value"], [
        ("m", m), ("k", k), ("n", n), ("trials", trials), ("lut_bits", dev["lut_bits"]),
        ("max_abs_mean_error", float(np.max(np.abs(mean)))),
        ("mean_err_var", float(var.mean())), ("mean_analytic_var", float(analytic.mean())),
        ("fraction_within_3sigma", float(within.mean())),
    ])
    fig = _plot("plot_matmul_errors", out / "matmul_errors.png", var, analytic)
    print(f"simulate-matmul: {m}x{k}x{n}, {trials} trials, {within.mean():.4f} of elements within 3 sigma")
    return [path, summary, fig]


def cmd_sweep_noise(cfg: ExperimentConfig, out: Path, args):
    from .experiments import MODES, load_data, pretrain, robustness_at
    train_ds, test_ds = load_data(cfg)
    base = pretrain(cfg, train_ds).model
    sigmas = cfg["sweep"]["sigma_fab_list"]
    modes = tuple(args.get("modes") or MODES)
    results = [robustness_at(cfg, base, train_ds, test_ds, s, modes) for s in sigmas]
    rows, flags = [], []
    labels = ["clean", "direct-noisy"] + list(modes)
    series = {lab: [] for lab in labels}
    for res in results:
        for label, mean, best, std in res.rows():
            rows.append((res.sigma_fab, label, mean, best, std))
            series[label].append(mean)
    # degradation is expected to be monotone in sigma for every noisy configuration
    for label in labels[1:]:
        vals = series[label]
        for i in range(1, len(vals)):
            if vals[i] > vals[i - 1]:
                flags.append((label, sigmas[i - 1], sigmas[i], vals[i - 1], vals[i]))
    path = write_csv(out / "sweep.csv", ["sigma_fab", "config", "mean_acc", "best_acc", "std_acc"], rows)
    fpath = write_csv(out / "sweep_monotonicity.csv",
                      ["config", "sigma_lo", "sigma_hi", "acc_lo", "acc_hi"], flags)
    for f in flags:
        log.warning("non-monotone degradation for %s between sigma %g and %g", *f[:3])
    fig = _plot("plot_accuracy_sweep", out / "sweep.png", list(sigmas), series)
    print(f"sweep-noise: {len(sigmas)} levels x {len(labels)} configurations, {len(flags)} monotonicity flags")
    return [path, fpath, fig]


def cmd_train(cfg: ExperimentConfig, out: Path, args):
    from .experiments import finetune_config, finetune_ctx, load_data, pretrain_config
    from .vit.checkpoint import load_checkpoint, save_checkpoint
    from .vit.model import TinyViT
    from .vit.train import EpochMetrics, train

    mode = args.get("mode", "clean")
    train_ds, test_ds = load_data(cfg)
    noise = cfg.noise
    if mode == "clean":
        tcfg = pretrain_config(cfg)
        ctx = SeedContext(cfg.seed).child("pretrain")
    else:
        tcfg = finetune_config(cfg, mode, noise)
        ctx = finetune_ctx(cfg, noise)
    ckpt_dir = out / "checkpoint"
    metrics_path = out / "metrics.csv"
    state = None
    if args.get("resume"):
        state, _ = load_checkpoint(args["resume"])
        model = state.model
    else:
        if mode == "clean":
            model = TinyViT(cfg.vit, ctx=SeedContext(cfg.seed).child("init"), naln_eps=cfg["naln"]["eps"])
        else:
            if not args.get("init"):
                raise ParameterError("fine-tuning needs --init CHECKPOINT (a clean model)")
            base, _ = load_checkpoint(args["init"])
            model = base.model.copy(norm_kind="NALN" if mode == "cct-naln" else "LN")
    history_rows = [m.row() for m in state.history] if state else []

    def on_epoch(st, metrics):
        if not np.isfinite(metrics.loss):
            raise NumericalContractError(f"non-finite training loss at epoch {metrics.epoch}")
        history_rows.append(metrics.row())
        write_csv(metrics_path, EpochMetrics.header, history_rows)
        save_checkpoint(ckpt_dir, st, {"mode": mode})

    state = train(model, train_ds, tcfg, ctx, eval_ds=test_ds, state=state, on_epoch=on_epoch)
    if not history_rows:
        write_csv(metrics_path, EpochMetrics.header, [])
        save_checkpoint(ckpt_dir, state, {"mode": mode})
    fig = _plot("plot_training", out / "training.png", state.history) if state.history else None
    outputs = [metrics_path, fig] + sorted(ckpt_dir.rglob("*"))
    last = state.history[-1] if state.history else None
    print(f"train[{mode}]: {state.epoch} epochs" + (f", clean acc {last.clean_acc:.4f}" if last else ""))
    return outputs


def cmd_evaluate(cfg: ExperimentConfig, out: Path, args):
    from .experiments import evaluate, load_data
    from .vit.checkpoint import load_checkpoint
    from .vit.train import accuracy

    if not args.get("checkpoint"):
        raise ParameterError("evaluate needs --checkpoint DIR")
    state, _ = load_checkpoint(args["checkpoint"])
    _, test_ds = load_data(cfg)
    ev = evaluate(cfg, state.model, test_ds, cfg.noise)
    clean = accuracy(state.model, test_ds)
    path = write_csv(out / "eval_trials.csv", ["trial", "accuracy"], enumerate(ev.per_trial))
    summary = write_csv(out / "eval_summary.csv", ["quantity", "value"], [
        ("sigma_fab", cfg.noise.sigma_fab), ("trials", len(ev.per_trial)), ("clean_acc", clean),
        ("noisy_mean", ev.mean), ("noisy_best", ev.best), ("noisy_std", ev.std)])
    fig = _plot("plot_eval", out / "eval_trials.png", list(ev.per_trial))
    print(f"evaluate: clean {clean:.4f}, noisy mean {ev.mean:.4f} best {ev.best:.4f} over {len(ev.per_trial)} trials")
    return [path, summary, fig]


def _coeffs(cfg: ExperimentConfig, override=None):
    e = cfg["energy"]
    path = override or e["coeffs_path"]
    coeffs = pm.EnergyCoeffs.from_json(Path(path).read_text()) if path else pm.EnergyCoeffs.calibrated()
    coeffs.eo_compensation_overhead = e["eo_overhead"]
    coeffs.eo_period_iters = e["eo_period"]
    coeffs.eo_scope = e["eo_scope"]
    coeffs.__post_init__()
    return coeffs


def cmd_energy_report(cfg: ExperimentConfig, out: Path, args):
    coeffs = _coeffs(cfg, args.get("coeffs"))
    reports = pm.preset_reports(coeffs, cfg.geometry)
    breakdown = write_csv(out / "energy_breakdown.csv", ["model", "component", "energy_pj", "latency_ns"],
                          ((name, comp, e, lat) for name, rep in reports.items() for comp, e, lat in rep.rows()))
    totals = []
    for name, rep in reports.items():
        ref_l, ref_e = pm.REFERENCE.siph_latency_us[name], pm.REFERENCE.siph_energy_uj[name]
        totals.append((name, rep.total_latency_us, ref_l, rep.total_latency_us / ref_l - 1.0,
                       rep.total_energy_uj, ref_e, rep.total_energy_uj / ref_e - 1.0,
                       pm.kfps_per_watt(rep.total_latency_us * 1e-6, rep.total_energy_uj * 1e-6)))
    tpath = write_csv(out / "energy_totals.csv",
                      ["model", "latency_us", "ref_latency_us", "latency_rel_dev", "energy_uj", "ref_energy_uj",
                       "energy_rel_dev", "kfps_per_watt"], totals)
    cpath = write_csv(out / "compare_table.csv",
                      ["model", "metric", "platform", "value", "siph", "ratio", "printed", "matches_print"],
                      ((r.model, r.metric, r.platform, float(r.value), float(r.siph), r.ratio, r.printed,
                        r.matches_print) for r in pm.compare_table()))
    kpath = write_csv(out / "kfps_per_watt.csv", ["design", "kfps_per_watt"],
                      ((k, float(v)) for k, v in pm.baseline_kfps_per_watt().items()))
    (out / "compare_table.txt").write_text(pm.format_compare_table() + "\n")
    fig = _plot("plot_energy", out / "energy_breakdown.png", reports)
    for row in totals:
        print(f"{row[0]:<6} latency {row[1]:10.1f} us ({row[3]:+.1%})  energy {row[4]:8.2f} uJ ({row[6]:+.1%})")
    return [breakdown, tpath, cpath, kpath, out / "compare_table.txt", fig]


def cmd_fit_coeffs(cfg: ExperimentConfig, out: Path, args):
    e = cfg["energy"]
    coeffs = pm.fit_coefficients(cfg.geometry, e["eo_overhead"], e["eo_period"])
    path = Path(args.get("output") or out / "energy_coeffs.json")
    path.write_text(coeffs.to_json() + "\n")
    res = pm.calibration_residuals(coeffs, cfg.geometry)
    rpath = write_csv(out / "fit_residuals.csv", ["model", "latency_rel_dev", "energy_rel_dev"],
                      ((name, lat, en) for name, (lat, en) in res.items()))
    worst = max(max(abs(a), abs(b)) for a, b in res.values())
    print(f"fit-coeffs: worst relative residual {worst:.2%}; wrote {path}")
    return [path, rpath]


def cmd_export_lut(cfg: ExperimentConfig, out: Path, args):
    dev = cfg["device"]
    bits = args.get("bits") or dev["lut_bits"]
    lut = build_lut(bits, dev["gamma_nm"], dev["delta_max_nm"])
    path = out / f"lut_{bits}bit.csv"
    lut.to_csv(path)
    levels = lut.level(np.arange(len(lut)))
    fig = _plot("plot_lut", out / f"lut_{bits}bit.png", levels, lut.level_to_detuning(levels))
    print(f"export-lut: {len(lut)} entries -> {path}")
    return [path, fig]


def cmd_export_variation_map(cfg: ExperimentConfig, out: Path, args):
    v = cfg["variation"]
    ctx = SeedContext(cfg.seed).child("variation-map")
    vmap = generate_variation_map(ctx, v["width_mm"], v["height_mm"], v["cell_mm"], v["l_w_mm"], v["amplitude_nm"])
    path = out / "variation_map.csv"
    vmap.to_csv(path)
    banks = sample_bank_shifts(vmap, ctx.child("banks"), v["n_rings"], v["placements"])
    gamma = cfg["device"]["gamma_nm"]
    bpath = write_csv(out / "bank_samples.csv", ["placement", "row", "col", "sigma_b_nm", "sigma_b_over_gamma"],
                      ((i, int(r), int(c), s, s / gamma)
                       for i, ((r, c), s) in enumerate(zip(banks.locations, banks.sigma_b))))
    fig = _plot("plot_variation_map", out / "variation_map.png", vmap.grid, vmap.cell_size_mm)
    print(f"export-variation-map: {vmap.grid.shape[0]}x{vmap.grid.shape[1]} cells, "
          f"mean bank sigma {banks.sigma_b.mean():.4f} nm")
    return [path, bpath, fig]


COMMANDS = {
    "simulate-matmul": cmd_simulate_matmul,
    "sweep-noise": cmd_sweep_noise,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "energy-report": cmd_energy_report,
    "fit-coeffs": cmd_fit_coeffs,
    "export-lut": cmd_export_lut,
    "export-variation-map": cmd_export_variation_map,
}


# -- argument handling ----------------------------------------------------------

def apply_overrides(cfg: ExperimentConfig, overrides):
    """Apply ``section.key=value`` strings on top of ``cfg``."""
    values = {s: dict(v) for s, v in cfg.values.items()}
    for item in overrides or ():
        lhs, sep, raw = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        where = f"--set {item}"
        if not sep or not dot:
            raise ConfigError("expected section.key=value", where)
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError("unknown section or key", where)
        try:
            values[section][key] = SCHEMA[section][key][0](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value {raw!r}: {exc}", where) from None
    new = ExperimentConfig(values, cfg.source)
    validate(new)
    return new


def build_parser():
    p = argparse.ArgumentParser(prog="photonvit", description="Photonic ViT accelerator simulator and trainer.")
    p.add_argument("--version", action="version", version=f"photonvit {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="experiment config file (INI sections)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
        sp.add_argument("--out", help="output directory (overrides [run] output_dir)")
        return sp

    add("simulate-matmul", "emulator error statistics vs the analytic MAC variance")
    sp = add("sweep-noise", "accuracy vs sigma_fab for the clean, noisy and fine-tuned models")
    sp.add_argument("--modes", nargs="+", choices=["normal-ft", "cct", "cct-naln"])
    sp = add("train", "train a clean model or fine-tune one")
    sp.add_argument("--mode", default="clean", choices=["clean", "normal-ft", "cct", "cct-naln"])
    sp.add_argument("--init", help="checkpoint of the clean model to fine-tune")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp = add("evaluate", "noisy accuracy of a checkpoint over [eval] trials")
    sp.add_argument("--checkpoint")
    sp = add("energy-report", "energy/latency breakdown and reference comparison")
    sp.add_argument("--coeffs", help="EnergyCoeffs JSON (default: shipped calibration)")
    sp = add("fit-coeffs", "refit per-event coefficients to the reference totals")
    sp.add_argument("--output", help="where to write the coefficients JSON")
    sp = add("export-lut", "write the detuning lookup table")
    sp.add_argument("--bits", type=int, help="LUT resolution (default [device] lut_bits)")
    add("export-variation-map", "write a spatial resonance-shift map and bank samples")
    rp = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="output directory (default: the recorded one)")
    return p


_COMMAND_ARGS = ("modes", "mode", "init", "resume", "checkpoint", "coeffs", "output", "bits")


def run(command, cfg: ExperimentConfig, cmd_args):
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    outputs = [p for p in COMMANDS[command](cfg, out, cmd_args) if p is not None]
    write_manifest(out, command, cmd_args, cfg, outputs)
    return outputs


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "replay":
            try:
                manifest = json.loads(Path(args.manifest).read_text())
                command, cmd_args = manifest["command"], manifest["args"]
                cfg = parse_config(manifest["config"], str(args.manifest))
            except (OSError, KeyError, json.JSONDecodeError) as exc:
                raise ConfigError(f"unusable manifest ({exc})", args.manifest) from None
        else:
            command = args.command
            cfg = load_config(args.config) if args.config else defaults()
            cfg = apply_overrides(cfg, args.set)
            cmd_args = {k: getattr(args, k) for k in _COMMAND_ARGS if getattr(args, k, None) is not None}
        if args.out:
            cfg = cfg.with_output_dir(args.out)
        run(command, cfg, cmd_args)
    except (ConfigError, ParameterError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalContractError as exc:
        print(f"numerical contract violated: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
