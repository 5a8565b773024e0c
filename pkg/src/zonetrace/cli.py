"""Command-line entry points.

Subcommands cover the whole workflow: simulate a release, generate a
training design, train the surrogate archive, synthesize sensor
observations, run posterior inference with either backend, drive the
incremental sensor protocol, rebuild the report experiments, and validate
a trained archive. Every command takes an explicit seed where randomness
is involved, so runs are reproducible bit for bit.
"""

from __future__ import annotations

import argparse
import pathlib
import sys
from typing import List, Optional, Sequence

import numpy as np
import yaml

from . import harness, inference, netflow, sensornet
from .buildingio import load_building, seven_room
from .errors import ZonetraceError
from .inference import InferenceSettings, ParameterRanges, StateSpace
from .netflow import SourceScenario
from .sensornet import SensorDeployment


def _int_list(text: str) -> List[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def load_scenario(path: str) -> SourceScenario:
    """Read a release scenario from YAML.

    Keys: count, zone, rate_g_s, start_min, locations (list of [x, y] in
    meters from the zone's southwest corner).
    """
    with open(path, encoding="utf-8") as handle:
        doc = yaml.safe_load(handle)
    try:
        return SourceScenario(
            count=int(doc["count"]),
            zone=int(doc["zone"]),
            rate=float(doc["rate_g_s"]),
            start_min=float(doc["start_min"]),
            locations=tuple((float(x), float(y))
                            for x, y in doc["locations"]))
    except (KeyError, TypeError) as exc:
        raise ZonetraceError(
            f"{path}: scenario needs count, zone, rate_g_s, start_min and "
            f"locations ({exc})") from exc


def _building(args) -> netflow.BuildingNetwork:
    if getattr(args, "building", None):
        return load_building(args.building)
    return seven_room()


def _settings(args) -> InferenceSettings:
    return InferenceSettings(total=args.samples + args.burn,
                             burn_in=args.burn)


def cmd_simulate(args) -> int:
    net = _building(args)
    scenario = load_scenario(args.scenario)
    if not args.well_mixed:
        net = net.with_cfd(scenario.zone)
    trace = netflow.simulate(net, scenario, args.horizon)
    netflow.write_trace_csv(trace, args.out)
    print(f"wrote {trace.times_min.shape[0]} rows to {args.out}")
    balance = trace.injected_g - trace.exhausted_g - trace.stored_g
    print(f"mass closure: injected {trace.injected_g:.4f} g, "
          f"residual {balance:.2e} g")
    if args.plot:
        from . import plots
        out = plots.trace_overview(args.plot, trace, list(trace.zone_ids))
        print(f"figure {out}")
    return 0


def cmd_design(args) -> int:
    points = harness.lhs_design(args.points, args.dim, args.seed)
    header = (f"# seed={args.seed} points={args.points} dim={args.dim}\n"
              + ",".join(f"x{j + 1}" for j in range(args.dim)))
    np.savetxt(args.out, points, delimiter=",", header=header, comments="")
    print(f"wrote {args.points} x {args.dim} design to {args.out}")
    return 0


def cmd_train(args) -> int:
    if args.scale == "paper":
        config = harness.CampaignConfig.paper(seed=args.seed)
    else:
        config = harness.CampaignConfig.desk(seed=args.seed)
    overrides = {}
    if args.source_zones:
        overrides["source_zones"] = tuple(_int_list(args.source_zones))
    if args.source_counts:
        overrides["source_counts"] = tuple(_int_list(args.source_counts))
    if args.sensors:
        overrides["sensed_zones"] = tuple(_int_list(args.sensors))
    if overrides:
        import dataclasses
        config = dataclasses.replace(config, **overrides)
    building_text = None
    if args.building:
        building_text = pathlib.Path(args.building).read_text()
    result = harness.train_campaign(
        config, building_text=building_text,
        out_dir=pathlib.Path(args.out), workers=args.workers,
        progress=lambda msg: print(msg, flush=True))
    print(f"trained {result.family_count()} families into {args.out} "
          f"(config {config.config_hash()})")
    for record in result.records:
        print(f"  count {record.a} zone {record.b}: {record.n_design} "
              f"designs ({record.n_added} added), score "
              f"{record.final_score:.4f}")
    for failure in result.failures:
        print(f"  FAILED {failure}")
    return 1 if result.failures else 0


def cmd_make_obs(args) -> int:
    net = _building(args)
    scenario = load_scenario(args.scenario)
    deployment = SensorDeployment(zones=tuple(_int_list(args.sensors)))
    lo, hi = (float(p) for p in args.window.split(","))
    obs = harness.make_observations(
        net, scenario, deployment, seed=args.seed,
        horizon_min=args.horizon, window_rel=(lo, hi),
        noise_fraction=args.noise)
    inference.write_observations_csv(args.out, obs)
    print(f"wrote {obs.record_count} observations to {args.out}")
    return 0


def _space_and_families(args):
    """State space plus surrogate families (families None without archive)."""
    if args.emulator_dir:
        families, manifest = harness.load_campaign(args.emulator_dir)
        return harness.campaign_space(manifest, _building(args)), families
    if not args.direct_simulator:
        raise ZonetraceError(
            "either --emulator-dir or --direct-simulator is required")
    if not args.source_zones:
        raise ZonetraceError(
            "--direct-simulator without an archive needs --source-zones")
    return StateSpace(
        net=_building(args),
        zone_ids=tuple(_int_list(args.source_zones)),
        n_sources_max=args.max_sources,
        ranges=ParameterRanges()), None


def cmd_infer(args) -> int:
    if not args.obs:
        raise ZonetraceError("infer needs --obs (flag or config file)")
    obs = inference.read_observations_csv(args.obs)
    space, families = _space_and_families(args)
    if args.direct_simulator:
        predictor = inference.SimulatorPredictor(space.net, obs.max_time())
    else:
        predictor = inference.EmulatorPredictor(families, space.ranges)
    settings = _settings(args)
    chain, summaries = inference.run_inference(
        space, obs, predictor, seed=args.seed, settings=settings)
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inference.write_chain_csv(out / "chain.csv", chain, space)
    (out / "summary.txt").write_text(summaries.to_text())
    import json
    meta = {"seed": args.seed, "samples": settings.total - settings.burn_in,
            "burn_in": settings.burn_in,
            "backend": "direct" if args.direct_simulator else "emulator",
            "observations": str(args.obs)}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    from . import plots
    backend = "direct" if args.direct_simulator else "emulator"
    plots.posterior_comparison(out / "posterior.png",
                               {backend: summaries}, space)
    print(summaries.to_text(), end="")
    print(f"acceptance rate {chain.acceptance_rate:.3f}; "
          f"outputs in {out}")
    return 0


def cmd_sensor_net(args) -> int:
    net = _building(args)
    scenario = load_scenario(args.scenario)
    families, manifest = harness.load_campaign(args.emulator_dir)
    space = harness.campaign_space(manifest, net)
    deployment = SensorDeployment(zones=tuple(_int_list(args.sensors)))
    predictor = inference.EmulatorPredictor(families, space.ranges)
    trace = netflow.simulate(net.with_cfd(scenario.zone), scenario,
                             args.horizon)
    staged = sensornet.dynamic_protocol(trace, deployment, space, predictor,
                                        args.seed, settings=_settings(args))
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    det = staged.plan.detection
    print(f"detected in zone {det.zone} at minute {det.time_min:.0f}")
    sd_start, sd_rate = [], []
    for result in staged.results:
        stage = result.stage
        name = f"stage{stage.index}"
        inference.write_chain_csv(out / f"{name}_chain.csv", result.chain,
                                  space)
        (out / f"{name}_summary.txt").write_text(result.summaries.to_text())
        sd_start.append(result.summaries.start_sd)
        sd_rate.append(result.summaries.rate_sd)
        zones = ",".join(str(z) for z in stage.zones)
        print(f"stage {stage.index}: sensors [{zones}] minutes "
              f"{stage.window[0]:.0f}-{stage.window[1]:.0f}, sd(start) "
              f"{result.summaries.start_sd:.2f} min")
    from . import plots
    plots.staged_contraction(out / "contraction.png", sd_start, sd_rate,
                             scenario.zone)
    print(staged.final().summaries.to_text(), end="")
    print(f"outputs in {out}")
    return 0


def cmd_reproduce(args) -> int:
    settings = None
    if args.samples is not None:
        settings = _settings(args)
    reports = harness.reproduce(args.experiment, args.emulator_dir,
                                args.out, seed=args.seed, settings=settings)
    all_ok = True
    for report in reports:
        print(f"{report.name}: {report.runtime_s:.1f} s")
        for check in report.criteria:
            print("  " + check.line())
        all_ok = all_ok and report.passed()
    return 0 if all_ok else 1


def cmd_validate(args) -> int:
    families, manifest = harness.load_campaign(args.emulator_dir)
    print(f"archive {args.emulator_dir}: {len(families)} families, "
          f"config {manifest['config_hash']}")
    worst_err = 0.0
    worst_cvar = 0.0
    for (a, b), family in sorted(families.items()):
        err, cvar = harness.check_interpolation(family)
        worst_err = max(worst_err, err)
        worst_cvar = max(worst_cvar, cvar)
        print(f"  count {a} zone {b}: design reproduction {err:.2e}, "
              f"correlation variance {cvar:.2e}")
    ok = worst_err <= args.tol and worst_cvar <= args.tol
    print(("PASS" if ok else "FAIL")
          + f" interpolation at tolerance {args.tol:.0e}")
    return 0 if ok else 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="zonetrace",
        description="Indoor release simulation, surrogate training, and "
                    "Bayesian source localization.")
    sub = parser.add_subparsers(dest="command", required=True)
    subparsers = {}

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--config",
                       help="YAML file of option values; explicit flags win")
        subparsers[name] = p
        return p

    p = add("simulate", cmd_simulate,
            "run one release scenario and write the concentration trace")
    p.add_argument("--building", help="building YAML (default: packaged "
                                      "seven-room test building)")
    p.add_argument("--scenario", help="scenario YAML")
    p.add_argument("--horizon", type=float, default=48.0,
                   help="simulated minutes (default 48)")
    p.add_argument("--well-mixed", action="store_true",
                   help="keep the source zone well mixed instead of "
                        "resolving it on a grid")
    p.add_argument("--out", default="trace.csv")
    p.add_argument("--plot", help="optional PNG of zone histories")

    p = add("design", cmd_design,
            "write a Latin hypercube design on the unit box")
    p.add_argument("--points", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="design.csv")

    p = add("train-emulator", cmd_train,
            "train the surrogate archive for a sensing campaign")
    p.add_argument("--scale", choices=("desk", "paper"), default="desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--building", help="building YAML override")
    p.add_argument("--source-zones", help="comma list, e.g. 1,2,4")
    p.add_argument("--source-counts", help="comma list, e.g. 1,2,3")
    p.add_argument("--sensors", help="comma list of sensed zones")
    p.add_argument("--workers", type=int, default=None,
                   help="parallel simulator processes (default "
                        "ZONETRACE_WORKERS or 1)")
    p.add_argument("--out", help="archive directory")

    p = add("make-obs", cmd_make_obs,
            "synthesize noisy sensor observations for a scenario")
    p.add_argument("--building")
    p.add_argument("--scenario")
    p.add_argument("--sensors", default="1,2,3,4,5,6")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--horizon", type=float, default=48.0)
    p.add_argument("--window", default="1,5",
                   help="minutes after detection, inclusive (default 1,5)")
    p.add_argument("--noise", type=float, default=None,
                   help="override sensor noise fraction")
    p.add_argument("--out", default="observations.csv")

    p = add("infer", cmd_infer,
            "sample the source posterior from recorded observations")
    p.add_argument("--obs", help="observations CSV")
    p.add_argument("--emulator-dir", help="trained archive directory")
    p.add_argument("--direct-simulator", action="store_true",
                   help="evaluate candidates with the coupled simulator")
    p.add_argument("--building")
    p.add_argument("--source-zones",
                   help="candidate zones when no archive is given")
    p.add_argument("--max-sources", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=6000,
                   help="kept samples after burn-in")
    p.add_argument("--burn", type=int, default=3000)
    p.add_argument("--out", default="inference-out")

    p = add("sensor-net", cmd_sensor_net,
            "run the incremental sensor protocol on a simulated release")
    p.add_argument("--building")
    p.add_argument("--scenario")
    p.add_argument("--emulator-dir")
    p.add_argument("--sensors", default="1,2,3,4,5,6")
    p.add_argument("--horizon", type=float, default=48.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=6000)
    p.add_argument("--burn", type=int, default=3000)
    p.add_argument("--out", default="sensor-net-out")

    p = add("reproduce", cmd_reproduce,
            "rebuild a report experiment and check its acceptance gates")
    p.add_argument("experiment", nargs="?", default="all",
                   help="one of " + ", ".join(harness.EXPERIMENTS)
                        + ", or 'all' (the default)")
    p.add_argument("--emulator-dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=None,
                   help="override kept samples per chain")
    p.add_argument("--burn", type=int, default=3000)
    p.add_argument("--out", default="reports")

    p = add("validate", cmd_validate,
            "check a trained archive's interpolation property")
    p.add_argument("--emulator-dir")
    p.add_argument("--tol", type=float, default=1e-8)

    return parser, subparsers


def _apply_config(args, subparser) -> None:
    """Fill options from the YAML config file; explicit flags win.

    A value from the file applies only where the parsed value still equals
    the subcommand's default.
    """
    with open(args.config, encoding="utf-8") as handle:
        doc = yaml.safe_load(handle) or {}
    if not isinstance(doc, dict):
        raise ZonetraceError(f"{args.config}: config must be a mapping")
    for key, value in doc.items():
        dest = str(key).replace("-", "_")
        if not hasattr(args, dest) or dest in ("config", "func", "command"):
            raise ZonetraceError(
                f"{args.config}: unknown option {key!r} for this command")
        if getattr(args, dest) == subparser.get_default(dest):
            setattr(args, dest, value)


def _require(args, *dests) -> None:
    for dest in dests:
        if getattr(args, dest, None) in (None, ""):
            flag = "--" + dest.replace("_", "-")
            raise ZonetraceError(f"missing required option {flag} "
                                 "(flag or config file)")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    try:
        if getattr(args, "config", None):
            _apply_config(args, subparsers[args.command])
        needed = {
            "simulate": ("scenario",),
            "design": ("points", "dim"),
            "train-emulator": ("out",),
            "make-obs": ("scenario",),
            "sensor-net": ("scenario", "emulator_dir"),
            "reproduce": ("emulator_dir",),
            "validate": ("emulator_dir",),
        }
        _require(args, *needed.get(args.command, ()))
        return args.func(args)
    except ZonetraceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
