"""Command-line front end.

    svmpvar simulate|estimate|irf|report|validate-config -c run.ini [options]

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path


from . import __version__
from .config import EXAMPLE, ConfigError, RunConfig, parse_matrix

log = logging.getLogger("svmpvar")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# ------------------------------------------------------------------- helpers


def _header(cfg: RunConfig, seed=None) -> dict:
    return cfg.provenance(seed)


def _schema(cfg: RunConfig):
    from .panel import PanelSchema

    return PanelSchema(
        values=cfg.variables(),
        country=cfg.get("data", "country_column", "country"),
        year=cfg.get("data", "year_column", "year"),
        units=cfg.units(),
    )


def _dataset(cfg: RunConfig):
    from .panel import load_panel, subsample

    panel = cfg.path("data", "panel", must_exist=True)
    if panel is None:
        raise ConfigError("[data] panel is required")
    meta = cfg.path("data", "metadata", must_exist=True)
    ds = load_panel(panel, _schema(cfg), meta)
    sub = cfg.get("data", "subsample")
    if sub:
        ds = subsample(ds, sub)
    return ds


def _draws_path(cfg: RunConfig, section: str) -> Path:
    return cfg.path(section, "draws") or cfg.output_dir / "draws"


def _shocks(cfg: RunConfig, variables):
    from .irf import ShockSpec

    text = cfg.get("irf", "shocks")
    if not text:
        return [ShockSpec("volatility", j, 1.0) for j in range(len(variables))] + [
            ShockSpec("level", j, 1.0) for j in range(len(variables))
        ]
    try:
        return [ShockSpec.parse(s, variables) for s in text.split(";") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"[irf] shocks: {exc}") from None


def _slug(text: str) -> str:
    text = text.replace("+", "p").replace("-", "m")
    return re.sub(r"[^A-Za-z0-9]+", "_", text).strip("_")


def _prepare_output(cfg: RunConfig) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out / "effective_config.ini")
    return out


# ------------------------------------------------------------------ commands


def cmd_validate(cfg: RunConfig, args) -> int:
    spec = cfg.model_spec()
    for key in ("panel", "metadata"):
        cfg.path("data", key, must_exist=True)
    cfg.path("simulate", "parameters", must_exist=True)
    for key in ("theta", "Q", "gamma0"):
        v = cfg.get("simulate", key)
        if v:
            m = parse_matrix(v, f"[simulate] {key}")
            if m.shape != (spec.N, spec.N):
                raise ConfigError(f"[simulate] {key}: expected {spec.N}x{spec.N}")
    _shocks(cfg, spec.variables)
    baseline = cfg.get("irf", "baseline", "posterior")
    if baseline not in ("posterior", "draw", "country"):
        raise ConfigError(f"[irf] baseline must be posterior, draw or country, got {baseline!r}")
    print(f"configuration OK (hash {cfg.hash})")
    return EXIT_OK


def cmd_simulate(cfg: RunConfig, args) -> int:
    from .model import NonStationaryError
    from .panel import CountryMeta, write_metadata, write_panel
    from .simulate import demo_parameters, simulate_panel
    from .storage import load_parameters, save_parameters

    spec = cfg.model_spec()
    M = cfg.getint("simulate", "countries", 50)
    T = cfg.getint("simulate", "years", 60)
    seed = cfg.getint("simulate", "seed", 0)
    first = cfg.getint("simulate", "first_year", 1961)
    burn = cfg.getint("simulate", "burn_in", 200)
    n_regions = cfg.getint("simulate", "regions", 1)
    over = {}
    for key in ("theta", "Q", "gamma0"):
        v = cfg.get("simulate", key)
        if v:
            over[key] = parse_matrix(v, f"[simulate] {key}")
            if over[key].shape != (spec.N, spec.N):
                raise ConfigError(f"[simulate] {key}: expected {spec.N}x{spec.N}")
    stored = cfg.path("simulate", "parameters", must_exist=True)
    params = load_parameters(stored) if stored else demo_parameters(spec, M, T, seed=seed, **over)
    # synthetic country groups so every subsample filter has members
    countries = [CountryMeta(id=f"C{i:03d}", region=f"R{i % max(n_regions, 1) + 1}", poor=i % 2 == 0,
                             hot=i % 3 == 0, agricultural=i % 4 < 2) for i in range(M)]
    try:
        rec = simulate_panel(params, spec, M, T, burn_in=burn, seed=seed, years=range(first, first + T),
                             countries=countries)
    except NonStationaryError as exc:
        raise ConfigError(f"invalid parameters: {exc}") from None
    out = _prepare_output(cfg)
    head = _header(cfg, seed)
    write_panel(rec.dataset, out / "panel.csv", header=head)
    write_metadata(rec.dataset, out / "metadata.csv", header=head)
    save_parameters(rec.true_params, out / "truth")
    (out / "truth" / "provenance.json").write_text(json.dumps(head, sort_keys=True, indent=1) + "\n")
    print(f"simulated {M} countries x {T} years -> {out}")
    return EXIT_OK


def cmd_estimate(cfg: RunConfig, args) -> int:
    from .diagnostics import build_report
    from .gibbs import run_chain
    from .storage import save_draws

    spec = cfg.model_spec()
    ds = _dataset(cfg)
    mc = spec.mcmc
    print(f"iterations={mc.iterations} burn_in={mc.burn_in} thin={mc.thin} retained={mc.retained} "
          f"particles={mc.particle_count} seed={mc.seed}")
    out = _prepare_output(cfg)
    every = max(1, mc.iterations // 20)

    def progress(it, cur):
        if (it + 1) % every == 0:
            log.info("iteration %d/%d", it + 1, mc.iterations)

    draws = run_chain(ds, spec, checkpoint_dir=out / "chain", resume=args.resume, progress=progress)
    head = _header(cfg)
    save_draws(draws, out / "draws", extra_meta={"provenance": head})
    build_report(draws, ds).write(out / "report", header=head)
    print(f"{len(draws)} draws -> {out / 'draws'}")
    return EXIT_OK


def cmd_irf(cfg: RunConfig, args) -> int:
    from .irf import posterior_irf
    from .storage import load_draws

    path = _draws_path(cfg, "irf")
    if not (path / "layout.json").exists():
        raise ConfigError(f"no posterior draws at {path}")
    draws = load_draws(path)
    H = cfg.getint("irf", "horizon", 10)
    baseline = cfg.get("irf", "baseline", "posterior")
    country = cfg.getint("irf", "country")
    shocks = _shocks(cfg, draws.spec.variables)
    out = _prepare_output(cfg) / "irf"
    out.mkdir(exist_ok=True)
    head = _header(cfg)
    for s in shocks:
        res = posterior_irf(draws, s, H, baseline=baseline, country=country)
        name = _slug(s.label(draws.spec.variables))
        res.to_csv(out / f"{name}.csv", header={**head, "delta": res.delta}, summary_path=out / f"{name}_summary.csv")
        print(f"{s.label(draws.spec.variables)} -> {out / (name + '.csv')}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    from .diagnostics import build_report
    from .storage import load_draws

    path = _draws_path(cfg, "report")
    if not (path / "layout.json").exists():
        raise ConfigError(f"no posterior draws at {path}")
    draws = load_draws(path)
    ds = _dataset(cfg) if cfg.get("data", "panel") else None
    var = cfg.get("report", "variable")
    j = draws.spec.variables.index(var) if var else 0
    out = _prepare_output(cfg) / "report"
    build_report(draws, ds, variable=j).write(out, header=_header(cfg))
    print(f"report -> {out}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "irf": cmd_irf,
    "report": cmd_report,
    "validate-config": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="svmpvar", description="Panel VAR with stochastic volatility in mean.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--example-config", action="store_true", help="print an example configuration and exit")
    p.add_argument("command", nargs="?", choices=sorted(COMMANDS))
    p.add_argument("-c", "--config", help="INI configuration file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a value")
    p.add_argument("--output", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--subsample")
    p.add_argument("--draws", help="posterior draws directory (irf, report)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _flag_overrides(args) -> list[str]:
    out = []
    if args.output:
        out.append(f"output.directory={Path(args.output).resolve()}")
    if args.seed is not None:
        out.append(f"{'simulate' if args.command == 'simulate' else 'mcmc'}.seed={args.seed}")
    if args.workers is not None:
        out += [f"mcmc.workers={args.workers}", f"mcmc.parallel_countries={'yes' if args.workers > 1 else 'no'}"]
    if args.iterations is not None:
        out.append(f"mcmc.iterations={args.iterations}")
    if args.subsample:
        out.append(f"data.subsample={args.subsample}")
    if args.draws:
        out += [f"irf.draws={Path(args.draws).resolve()}", f"report.draws={Path(args.draws).resolve()}"]
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.example_config:
        print(EXAMPLE, end="")
        return EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command is None:
        print("error: a command is required", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if not args.config:
            raise ConfigError("a configuration file is required (-c)")
        cfg = RunConfig.load(args.config).override(args.set + _flag_overrides(args))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit code 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if args.verbose:
            raise
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
