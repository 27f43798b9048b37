"""Command-line entry point.

Every subcommand resolves its settings as: flag > ``--config`` JSON > default,
and writes the resolved values to ``run_config.json`` next to its output.
Exit codes: 0 success, 1 verification/validation failure, 2 usage error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("sasnet")


class UsageError(Exception):
    pass


# defaults per command; keys are argparse dests
DEFAULTS = {
    "gradcheck": {"seed": 0, "seeds": 20, "out": None},
    "synth": {
        "out": None, "pairs": None, "sequences": None, "frames": 50, "seed": 0,
        "speed": None, "distractors": 1, "occluder": False, "clutter": 12,
    },
    "train": {
        "stage": None, "data": None, "synthetic_pairs": None, "init": None, "out": None,
        "stream": False, "widths": "table1", "init_gain": 0.1, "batch_pairs": 4, "lr_stage1": 0.001, "lr_theta_s_stage2": 0.0001,
        "lr_theta_att_stage2": 0.001, "rmsprop_decay": 0.9, "rmsprop_epsilon": 1e-8,
        "iterations": 1000, "seed": 0, "log_every": 10, "checkpoint_every": 100,
        "sigma": 2.0, "resume": False,
    },
    "track": {
        "params": None, "seq": None, "init": None, "init_from_gt": False, "out": None,
        "scale_factors": "0.9615384615384615,1.0,1.04", "scale_penalty": 0.975,
        "scale_damping": 0.6, "upsample_factor": 16, "cosine_window": False,
        "window_influence": 0.3,
    },
    "eval": {"results": None, "gt": None, "report": None, "figures": True, "dat": False, "label": "sasnet"},
    "bench": {"aspects": "1,2", "repeats": 50, "out": None},
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sasnet", description="Attention Siamese tracker toolkit")
    p.add_argument("--config", help="JSON file with flat keys mirroring flag names")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=S)
    g.add_argument("--seeds", type=int, default=S, help="random cases per check")
    g.add_argument("--out", default=S, help="also write the report here")

    s = sub.add_parser("synth", help="render synthetic pairs or sequences")
    s.add_argument("--out", default=S)
    s.add_argument("--pairs", type=int, default=S)
    s.add_argument("--sequences", type=int, default=S)
    s.add_argument("--frames", type=int, default=S)
    s.add_argument("--seed", type=int, default=S)
    s.add_argument("--speed", type=float, default=S, help="fixed target speed (0 = static)")
    s.add_argument("--distractors", type=int, default=S)
    s.add_argument("--clutter", type=int, default=S)
    s.add_argument("--occluder", action="store_true", default=S)

    t = sub.add_parser("train", help="stage-1 or stage-2 training")
    t.add_argument("stage", choices=["stage1", "stage2"])
    t.add_argument("--data", default=S, help="directory of sequence folders")
    t.add_argument("--synthetic-pairs", type=int, default=S, help="render N pairs in memory instead of --data")
    t.add_argument("--stream", action="store_true", default=S, help="re-render synthetic pairs on use, no cache")
    t.add_argument("--init", default=S, help="initial parameter file")
    t.add_argument("--out", default=S)
    t.add_argument("--widths", default=S, help="table1, toy, or five comma-separated widths")
    t.add_argument("--init-gain", type=float, default=S, help="multiplier on the He std for fresh conv weights")
    for name, typ in (
        ("batch-pairs", int), ("lr-stage1", float), ("lr-theta-s-stage2", float),
        ("lr-theta-att-stage2", float), ("rmsprop-decay", float), ("rmsprop-epsilon", float),
        ("iterations", int), ("seed", int), ("log-every", int), ("checkpoint-every", int), ("sigma", float),
    ):
        t.add_argument(f"--{name}", type=typ, default=S)
    t.add_argument("--resume", action="store_true", default=S)

    k = sub.add_parser("track", help="track one sequence")
    k.add_argument("--params", default=S)
    k.add_argument("--seq", default=S)
    k.add_argument("--init", default=S, help='initial box "x,y,w,h" (top-left anchored)')
    k.add_argument("--init-from-gt", action="store_true", default=S)
    k.add_argument("--out", default=S)
    k.add_argument("--scale-factors", default=S)
    k.add_argument("--scale-penalty", type=float, default=S)
    k.add_argument("--scale-damping", type=float, default=S)
    k.add_argument("--upsample-factor", type=int, default=S)
    k.add_argument("--cosine-window", action="store_true", default=S)
    k.add_argument("--window-influence", type=float, default=S)

    e = sub.add_parser("eval", help="score results against ground truth")
    e.add_argument("--results", nargs="+", default=S)
    e.add_argument("--gt", nargs="+", default=S)
    e.add_argument("--report", default=S)
    e.add_argument("--no-figures", dest="figures", action="store_false", default=S)
    e.add_argument("--dat", action="store_true", default=S, help="also write gnuplot .dat curves")
    e.add_argument("--label", default=S)

    b = sub.add_parser("bench", help="correlation cost: FLOPs and wall time")
    b.add_argument("--aspects", default=S, help="comma-separated exemplar aspect ratios")
    b.add_argument("--repeats", type=int, default=S)
    b.add_argument("--out", default=S)
    return p


def resolve(command: str, flags: dict, config_path=None) -> dict:
    """Merge flag values over the config file over the defaults."""
    cfg = {}
    if config_path:
        try:
            cfg = json.loads(Path(config_path).read_text())
        except OSError as exc:
            raise FileNotFoundError(f"config {config_path}: {exc.strerror or exc}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {config_path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"config {config_path}: expected a JSON object")
    defaults = DEFAULTS[command]
    resolved = {}
    for key, default in defaults.items():
        key_cfg = cfg.get(key, cfg.get(key.replace("_", "-"), default))
        resolved[key] = flags.get(key, key_cfg)
    unknown = set(cfg) - set(defaults) - {"command"}
    if unknown:
        log.warning("ignoring unknown config keys: %s", ", ".join(sorted(unknown)))
    return resolved


def _echo(out_dir, command: str, conf: dict):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.json").write_text(json.dumps({"command": command, **conf}, indent=2, sort_keys=True) + "\n")


def _parse_box(text: str):
    from .crops import BBox

    try:
        x, y, w, h = (float(v) for v in text.split(","))
        return BBox.from_xywh(x, y, w, h)
    except ValueError as exc:
        raise UsageError(f"malformed --init {text!r}: expected x,y,w,h with positive w,h ({exc})") from None


def _widths(value):
    from . import net

    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    named = {"table1": net.TABLE1_WIDTHS, "toy": net.TOY_WIDTHS}
    if value in named:
        return named[value]
    try:
        widths = tuple(int(v) for v in str(value).split(","))
    except ValueError:
        raise UsageError(f"bad --widths {value!r}") from None
    if len(widths) != 5 or min(widths) < 1:
        raise UsageError(f"--widths needs five positive integers, got {value!r}")
    return widths


def _floats(text, name):
    try:
        return tuple(float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"bad --{name} {text!r}") from None


# ---------------------------------------------------------------- commands


def cmd_gradcheck(c) -> int:
    from . import gradcheck

    results = gradcheck.run_suite(c["seed"], c["seeds"])
    text = gradcheck.format_results(results)
    print(text)
    if c["out"]:
        Path(c["out"]).write_text(text + "\n")
        _echo(Path(c["out"]).parent, "gradcheck", c)
    failed = [r.name for r in results if not r.ok]
    if failed:
        print("FAILED: " + ", ".join(failed), file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_synth(c) -> int:
    from .synth import SynthConfig, write_pairs, write_sequences

    if c["out"] is None:
        raise UsageError("synth needs --out")
    if (c["pairs"] is None) == (c["sequences"] is None):
        raise UsageError("synth needs exactly one of --pairs or --sequences")
    cfg = SynthConfig(distractors=c["distractors"], occluder=bool(c["occluder"]), clutter=c["clutter"])
    if c["pairs"] is not None:
        paths = write_pairs(c["out"], c["seed"], c["pairs"], cfg)
    else:
        paths = write_sequences(c["out"], c["seed"], c["sequences"], c["frames"], cfg, c["speed"])
    _echo(c["out"], "synth", c)
    print(f"wrote {len(paths)} directories under {c['out']}")
    return EXIT_OK


def cmd_train(c) -> int:
    from . import net, train

    if c["out"] is None:
        raise UsageError("train needs --out")
    stage = 1 if c["stage"] == "stage1" else 2
    if stage == 2 and not c["init"]:
        raise UsageError("stage2 needs --init (stage-1 parameters)")
    if c["data"] is None and c["synthetic_pairs"] is None:
        raise UsageError("train needs --data or --synthetic-pairs")
    widths = _widths(c["widths"])
    if c["data"] is not None:
        if not Path(c["data"]).is_dir():
            raise FileNotFoundError(f"data directory {c['data']} does not exist")
        dataset = train.directory_pairs(c["data"], sigma=c["sigma"], seed=c["seed"])
    else:
        dataset = train.synthetic_pairs(c["seed"], c["synthetic_pairs"], sigma=c["sigma"], cache=not c["stream"])
    params = net.load_params(c["init"], widths=None) if c["init"] else net.init_params(c["seed"], widths, gain=c["init_gain"])
    config = train.TrainConfig(
        stage=stage, batch_pairs=c["batch_pairs"], lr_stage1=c["lr_stage1"],
        lr_theta_s_stage2=c["lr_theta_s_stage2"], lr_theta_att_stage2=c["lr_theta_att_stage2"],
        rmsprop_decay=c["rmsprop_decay"], rmsprop_epsilon=c["rmsprop_epsilon"],
        iterations=c["iterations"], seed=c["seed"], log_every=c["log_every"],
        checkpoint_every=c["checkpoint_every"],
    )
    out = Path(c["out"])
    _echo(out, "train", c)
    if stage == 1:
        print(f"stage 1: lr={config.lr_stage1} batch={config.batch_pairs}")
    else:
        print(f"stage 2: lr_theta_s={config.lr_theta_s_stage2} lr_theta_att={config.lr_theta_att_stage2} "
              f"batch={config.batch_pairs}")
    kw = dict(log_path=out / "train_log.csv", checkpoint_dir=out / "checkpoints", resume=bool(c["resume"]))
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    if stage == 1:
        result = train.train_stage1(dataset, config, params, **kw)
    else:
        result = train.train_stage2(dataset, params, config, **kw)
    net.save_params(result.params, out / "params.sasn")
    if result.history:
        print(f"final batch loss {result.history[-1][1]:.6f} after iteration {result.history[-1][0]}")
    return EXIT_OK


def cmd_track(c) -> int:
    from . import net, tracker
    from .crops import SequenceDir

    for key in ("params", "seq", "out"):
        if c[key] is None:
            raise UsageError(f"track needs --{key}")
    if bool(c["init"]) == bool(c["init_from_gt"]):
        raise UsageError("track needs exactly one of --init or --init-from-gt")
    seq = SequenceDir.open(c["seq"])
    if not seq.frames:
        raise FileNotFoundError(f"no frames in {c['seq']}")
    if c["init_from_gt"]:
        if not seq.groundtruth:
            raise FileNotFoundError(f"{c['seq']}/groundtruth.txt missing or empty")
        box = seq.groundtruth[0]
    else:
        box = _parse_box(c["init"])
    params = net.load_params(c["params"], widths=None)
    try:
        config = tracker.TrackConfig(
            scale_factors=_floats(c["scale_factors"], "scale-factors"),
            scale_penalty=c["scale_penalty"], scale_damping=c["scale_damping"],
            upsample_factor=c["upsample_factor"], cosine_window=bool(c["cosine_window"]),
            window_influence=c["window_influence"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = tracker.track_sequence(seq.frames, box, params, config)
    out = Path(c["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    tracker.write_results(out, result)
    _echo(out.parent, "track", c)
    print(f"tracked {len(result.boxes)} frames at {result.fps:.2f} fps -> {out}")
    return EXIT_OK


def cmd_eval(c) -> int:
    from concurrent.futures import ThreadPoolExecutor

    from . import evaluation, plotting, tracker
    from .crops import read_groundtruth

    for key in ("results", "gt", "report"):
        if not c[key]:
            raise UsageError(f"eval needs --{key}")
    results = [c["results"]] if isinstance(c["results"], str) else list(c["results"])
    gts = [c["gt"]] if isinstance(c["gt"], str) else list(c["gt"])
    if len(results) != len(gts):
        raise UsageError(f"{len(results)} result files but {len(gts)} ground-truth files")

    def one(pair):
        res_path, gt_path = pair
        rows = tracker.read_results(res_path)
        gt = read_groundtruth(gt_path)
        if len(rows) != len(gt):
            raise ValueError(f"{res_path}: {len(rows)} result rows vs {len(gt)} ground-truth boxes in {gt_path}")
        return evaluation.evaluate([b for b, _ in rows], gt)

    with ThreadPoolExecutor() as pool:
        reports = list(pool.map(one, zip(results, gts)))
    report = reports[0] if len(reports) == 1 else evaluation.merge_reports(reports)
    out = Path(c["report"])
    out.parent.mkdir(parents=True, exist_ok=True)
    evaluation.write_report(out, report, dat_dir=out.parent if c["dat"] else None)
    if c["figures"]:
        plotting.render_all(report, out.parent, c["label"])
    _echo(out.parent, "eval", c)
    print(f"frames={len(report.per_frame)} auc={report.auc:.4f} precision@20={report.precision_at_20:.4f} "
          f"mean_iou={report.mean_iou:.4f}")
    return EXIT_OK


def cmd_bench(c) -> int:
    from . import evaluation

    rows = evaluation.bench_xcorr(_floats(c["aspects"], "aspects"), c["repeats"])
    text = evaluation.format_bench(rows)
    print(text, end="")
    if c["out"]:
        out = Path(c["out"])
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
        _echo(out.parent, "bench", c)
    return EXIT_OK


COMMANDS = {
    "gradcheck": cmd_gradcheck, "synth": cmd_synth, "train": cmd_train,
    "track": cmd_track, "eval": cmd_eval, "bench": cmd_bench,
}


def _thread_limit():
    value = os.environ.get("SASNET_THREADS")
    if not value:
        return None
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"SASNET_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"SASNET_THREADS must be a positive integer, got {value!r}")
    return n


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    from threadpoolctl import threadpool_limits

    from .crops import FrameError
    from .net import ParamFormatError

    try:
        conf = resolve(args.command, flags, args.config)
        with threadpool_limits(limits=_thread_limit()):
            return COMMANDS[args.command](conf)
    except UsageError as exc:
        print(f"sasnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FrameError, ParamFormatError) as exc:
        print(f"sasnet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"sasnet: validation error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
