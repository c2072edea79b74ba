"""Command-line entry point: campaign runners and single-shot tools.

Log verbosity comes from the DEBRISCAT_LOG environment variable
(DEBUG, INFO, WARNING, ...; default WARNING).
"""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from pathlib import Path


LOG_ENV = "DEBRISCAT_LOG"


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)


def _campaign_parser(sub, name, help_text):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", help="scenario INI file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--population", help="population file (default: synthetic)")
    p.add_argument("--network", help="station network file (default: bundled)")
    p.add_argument("--days", type=float, help="simulated days (build-up or fragmentation window)")
    return p


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="debriscat", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    _campaign_parser(sub, "build-up", "survey a population and build a catalog")
    _campaign_parser(sub, "tasking", "build-up followed by tasking of the catalog")
    _campaign_parser(sub, "fragmentation", "breakup event, cloud survey and detection timeline")

    p = sub.add_parser("link", help="link two attributables")
    p.add_argument("attributables", help="attributable stream with (at least) two records")
    p.add_argument("--network", help="station network file (default: bundled)")
    p.add_argument("--pair", type=int, nargs=2, default=(0, 1), metavar=("I", "J"), help="record indices")
    p.add_argument("--chi-max", type=float, default=5.0)

    p = sub.add_parser("fit", help="least-squares orbit from attributables")
    p.add_argument("attributables", help="attributable stream")
    p.add_argument("--orbit", help="catalog file whose first record is the starting orbit "
                                   "(default: link the first two attributables)")
    p.add_argument("--network", help="station network file (default: bundled)")

    p = sub.add_parser("report", help="efficiency table of a catalog against the truth sidecar")
    p.add_argument("catalog", help="catalog file (JSON lines)")
    p.add_argument("truth", help="truth sidecar")
    p.add_argument("--population", required=True, help="population file")
    p.add_argument("--min-trails", type=int, default=3)
    return ap


def _run_campaign(args) -> int:
    from .scenario import ScenarioError, load_scenario, run_scenario
    try:
        sc = load_scenario(args.config, mode=args.command, seed=args.seed, out=args.out,
                           population=args.population, network=args.network, days=args.days)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        result = run_scenario(sc)
    except Exception as exc:  # noqa: BLE001 - reported with a nonzero exit
        logging.getLogger("debriscat").debug("campaign failed", exc_info=True)
        print(f"error: campaign failed: {exc}; partial outputs in {sc.out} are flagged INCOMPLETE",
              file=sys.stderr)
        return 1
    print(result.summary)
    print(f"outputs written to {sc.out}")
    return 0


def _load_atts(path, network):
    from .network import load_network
    from .survey import load_attributables
    return load_attributables(path, load_network(network))


def _print_orbit(orb):
    el = orb.elements
    print(f"  epoch {orb.epoch:.8f}  a {el.a:.4f} km  e {el.e:.6f}  I {math.degrees(el.inc):.5f} deg  "
          f"node {math.degrees(el.raan):.5f} deg  argp {math.degrees(el.argp):.5f} deg  "
          f"M {math.degrees(el.mean_anomaly):.5f} deg")


def _cmd_link(args) -> int:
    from .linkage import link_j2
    atts = _load_atts(args.attributables, args.network)
    i, j = args.pair
    if max(i, j) >= len(atts):
        print(f"error: {args.attributables} holds {len(atts)} records, pair ({i}, {j}) requested", file=sys.stderr)
        return 2
    cands = link_j2(atts[i], atts[j], chi_max=args.chi_max)
    if not cands:
        print("no accepted linkage")
        return 1
    for k, c in enumerate(sorted(cands, key=lambda c: c.chi)):
        el = c.elements1
        print(f"candidate {k}: chi {c.chi:.4f}  a {el.a:.4f} km  e {el.e:.6f}  I {math.degrees(el.inc):.5f} deg  "
              f"node {math.degrees(el.raan):.5f} deg  argp {math.degrees(el.argp):.5f} deg  "
              f"M {math.degrees(el.mean_anomaly):.5f} deg  (epoch {el.epoch:.8f})")
    return 0


def _cmd_fit(args) -> int:
    from .linkage import link_j2
    from .pipeline import (FitError, PipelineConfig, differential_correction, estimate_from_candidate,
                           fit_is_good, format_catalog, load_catalog)
    atts = _load_atts(args.attributables, args.network)
    if len(atts) < 2:
        print(f"error: underdetermined: {len(atts)} attributable(s) for 6 orbital parameters", file=sys.stderr)
        return 2
    cfg = PipelineConfig()
    if args.orbit:
        starts = load_catalog(args.orbit)[:1]
        if not starts:
            print(f"error: {args.orbit} holds no orbit", file=sys.stderr)
            return 2
    else:
        starts = [estimate_from_candidate(c, "FIT") for c in sorted(link_j2(atts[0], atts[1]), key=lambda c: c.chi)]
        if not starts:
            print("error: no starting orbit: the first two attributables do not link", file=sys.stderr)
            return 1
    fit = None
    for pre in starts:
        try:
            fit = differential_correction(pre, atts, cfg)
        except FitError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        if fit_is_good(fit, cfg):
            break
    print(f"fit: converged {fit.converged}  rms {fit.rms:.3f} arcsec ({fit.nrms:.2f} sigma)  "
          f"trails {len(atts)}  {fit.diagnostic}")
    _print_orbit(fit)
    sys.stdout.write(format_catalog([fit]))
    return 0 if fit_is_good(fit, cfg) else 1


def _cmd_report(args) -> int:
    from .metrics import BASELINE_RADAR, ENHANCED_RADAR, efficiency_report, format_rows
    from .pipeline import load_catalog
    from .population import load_population
    from .survey import load_truth
    for p in (args.catalog, args.truth, args.population):
        if not Path(p).exists():
            print(f"error: file not found: {p}", file=sys.stderr)
            return 2
    cat = load_catalog(args.catalog)
    rep = efficiency_report(cat, load_truth(args.truth), load_population(args.population),
                            (ENHANCED_RADAR, BASELINE_RADAR), args.min_trails)
    sys.stdout.write(format_rows(rep.table()))
    return 0


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("build-up", "tasking", "fragmentation"):
            return _run_campaign(args)
        return {"link": _cmd_link, "fit": _cmd_fit, "report": _cmd_report}[args.command](args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
