"""Command-line front end: ``oilad <command> [options]``.

Every command that writes an output also writes ``<output>.manifest.json``
with the resolved configuration, input and output digests and the package
version, which is enough to re-run it.  Outputs are guarded by a lock file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock

from . import __version__
from . import config as config_mod
from .data import atomic_write, load_jsonl, save_jsonl
from .errors import ConfigError, OiladError
from .evaluation import (ablation_run, ablation_csv, evaluate, rows_csv, theorem1_check,
                         value_correlation, window_sweep, Detector, remark_values)
from .features import (OnlineFeatures, as_array, dataset_features, features_csv,
                       windowed_features)
from .iforest import IsoForest
from .mdp import builtin_grid, greedy_rollout, load_grid_file, mc_first_visit, value_iteration
from .pipeline import environment, experiment, split_pool, test_pool, train_set
from .policy import TransformerPolicy, load_checkpoint, save_checkpoint, state_values
from .training import train, write_history_csv
from .trajectory import Dataset


def _digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(out: str | Path, command: str, cfg: dict, inputs: dict[str, str],
                    extra: dict | None = None) -> None:
    outputs = [Path(out)] + [Path(p) for p in (extra or {}).pop("_outputs", [])]
    doc = {
        "command": command,
        "oilad_version": __version__,
        "numpy_version": np.__version__,
        "config": cfg,
        "inputs": {k: {"path": str(v), "sha256": _digest(v)} for k, v in sorted(inputs.items()) if v},
        "outputs": {str(p): _digest(p) for p in outputs},
        "seeds": {s: cfg[s]["seed"] for s in ("data", "model", "train", "detect")},
    }
    doc.update(extra or {})
    atomic_write(f"{out}.manifest.json", json.dumps(doc, indent=2, sort_keys=True) + "\n")


class _Output:
    """Lock an output path for the duration of a command."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(f"{self.path}.lock")

    def __enter__(self):
        self.lock.acquire(timeout=60)
        return self.path

    def __exit__(self, *exc):
        self.lock.release()
        Path(self.lock.lock_file).unlink(missing_ok=True)
        return False


def _cfg(args) -> dict:
    return config_mod.load(args.config, args.set or [])


def _require(path: str | None, what: str) -> str:
    if not path:
        raise ConfigError(f"missing {what}")
    if not Path(path).exists():
        raise ConfigError(f"{what} {path} not found")
    return path


def _model(args, cfg) -> TransformerPolicy:
    return load_checkpoint(_require(args.model or cfg["paths"]["checkpoint"], "--model checkpoint"))


def _forest(args, cfg) -> IsoForest:
    return IsoForest.load(_require(args.forest or cfg["paths"]["forest"], "--forest file"))


def _data(path, cfg_key, cfg, what="--data") -> Dataset:
    return load_jsonl(_require(path or cfg["paths"][cfg_key], f"{what} dataset"))


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- commands -----------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _cfg(args)
    env, tables = environment(cfg)
    ds = train_set(cfg, env, tables) if args.split == "train" else test_pool(cfg, env, tables)
    with _Output(args.out) as out:
        save_jsonl(ds, out)
        _write_manifest(out, "gen", cfg, {}, {"split": args.split, "trajectories": len(ds),
                                              "anomaly_rate": ds.anomaly_rate})
    print(f"wrote {len(ds)} trajectories to {args.out} (anomaly rate {ds.anomaly_rate:.3f})")
    return 0


def cmd_train(args) -> int:
    cfg = _cfg(args)
    data_path = _require(args.data or cfg["paths"]["dataset"], "--data dataset")
    ds = load_jsonl(data_path)
    if len(ds) == 0:
        raise ConfigError(f"{data_path} holds no trajectories")
    first = ds[0]
    n_actions = int(args.actions) if args.actions else environment(cfg)[0].action_count
    model = TransformerPolicy(config_mod.policy_config(cfg, first.state_dim, n_actions))
    result = train(model, ds, config_mod.train_config(cfg))
    with _Output(args.out) as out:
        save_checkpoint(result.model, out)
        outputs = []
        if args.history:
            write_history_csv(result.history, args.history)
            outputs.append(args.history)
        _write_manifest(out, "train", cfg, {"data": data_path}, {"_outputs": outputs})
    last = result.history[-1] if result.history else None
    print(f"trained {result.model.parameter_count()} parameters; last losses {last}")
    return 0


def cmd_features(args) -> int:
    cfg = _cfg(args)
    model = _model(args, cfg)
    ds = _data(args.data, "dataset", cfg)
    pts = dataset_features(model, ds, config_mod.window_config(cfg))
    with _Output(args.out) as out:
        atomic_write(out, features_csv(pts))
        _write_manifest(out, "features", cfg, {"model": args.model, "data": args.data})
    print(f"wrote {len(pts)} feature points to {args.out}")
    return 0


def cmd_fit_boundary(args) -> int:
    from .evaluation import fit_boundary

    cfg = _cfg(args)
    model = _model(args, cfg)
    ds = _data(args.data, "dataset", cfg)
    det = cfg["detect"]
    forest = fit_boundary(model, ds.normal(), config_mod.window_config(cfg),
                          float(det["contamination"]), int(det["n_trees"]),
                          int(det["subsample"]) or None, int(det["seed"]))
    with _Output(args.out) as out:
        forest.save(out)
        _write_manifest(out, "fit-boundary", cfg, {"model": args.model, "data": args.data})
    print(f"fitted {forest.n_trees} trees (subsample {forest.subsample}); threshold {forest.threshold:.6f}")
    return 0


def _detector(args, cfg) -> Detector:
    det = cfg["detect"]
    return Detector(_model(args, cfg), config_mod.window_config(cfg), _forest(args, cfg),
                    str(det["rule"]), float(det["phi"]))


def cmd_score(args) -> int:
    cfg = _cfg(args)
    detector = _detector(args, cfg)
    if args.follow:
        return _follow(detector, sys.stdin, sys.stdout)
    ds = _data(args.data, "test", cfg)
    lines = []
    for t in ds:
        flags = detector.window_flags(t)
        verdict = bool(flags.any()) if detector.rule == "any-window" else detector.verdict(t)
        lines.append(json.dumps({"id": t.id, "label": t.label, "windows": int(len(flags)),
                                 "flagged": int(flags.sum()),
                                 "verdict": "anomalous" if verdict else "normal"}))
    text = "\n".join(lines) + "\n"
    if args.out:
        with _Output(args.out) as out:
            atomic_write(out, text)
            _write_manifest(out, "score", cfg, {"model": args.model, "forest": args.forest,
                                                "data": args.data})
    else:
        sys.stdout.write(text)
    return 0


def _follow(detector: Detector, stream, sink) -> int:
    """Per-step JSON lines ``{"id", "s", "a"}`` in; one line per completed window out.

    ``{"id", "end": true}`` closes a stream and emits its verdict.
    """
    from .evaluation import trajectory_verdict

    open_streams: dict[str, OnlineFeatures] = {}
    flags: dict[str, list[bool]] = {}
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = str(rec["id"])
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"stdin line {lineno}: {exc}") from exc
        if rec.get("end"):
            online = open_streams.pop(sid, None)
            f = flags.pop(sid, [])
            if online is not None:
                p = online.finish()
                if p is not None:
                    f.append(bool(detector.forest.predict([p.point])[0]))
            verdict = trajectory_verdict(f, detector.rule, detector.phi) if f else False
            sink.write(json.dumps({"id": sid, "verdict": "anomalous" if verdict else "normal",
                                   "windows": len(f)}) + "\n")
            sink.flush()
            continue
        online = open_streams.setdefault(sid, OnlineFeatures(detector.model, detector.windows, sid))
        p = online.push(rec["s"], int(rec["a"]))
        if p is None:
            continue
        score = float(detector.forest.score([p.point])[0])
        anomalous = score > detector.forest.threshold
        flags.setdefault(sid, []).append(anomalous)
        sink.write(json.dumps({"id": sid, "window_end": p.window_end, "f_AO": p.f_ao,
                               "f_SA": p.f_sa, "score": score, "anomalous": anomalous}) + "\n")
        sink.flush()
    return 0


def cmd_eval(args) -> int:
    cfg = _cfg(args)
    detector = _detector(args, cfg)
    ds = _data(args.data, "test", cfg)
    normal, anomalies = split_pool(ds)
    if not anomalies:
        raise ConfigError("evaluation data holds no anomalies")
    d = cfg["data"]
    report = evaluate(detector, normal, anomalies, int(d["test_size"]), float(d["anomaly_rate"]),
                      int(d["resamples"]), int(cfg["detect"]["seed"]), cfg)
    print(report.table_row())
    with _Output(args.out) as out:
        atomic_write(out, _dump_json(report.to_dict()))
        table = Path(str(out) + ".csv")
        rows = [{"class": k, "recall": c.recall, "precision": c.precision, "f1": c.f1}
                for k, c in sorted(report.classes.items())]
        atomic_write(table, rows_csv(rows))
        _write_manifest(out, "eval", cfg, {"model": args.model, "forest": args.forest,
                                           "data": args.data}, {"_outputs": [table]})
    return 0


def cmd_ablate(args) -> int:
    cfg = _cfg(args)
    train_ds = _data(args.data, "dataset", cfg)
    pool = _data(args.test, "test", cfg, "--test")
    exp = experiment(cfg, train_ds, pool)
    first = train_ds[0]
    n_actions = int(args.actions) if args.actions else environment(cfg)[0].action_count
    model = TransformerPolicy(config_mod.policy_config(cfg, first.state_dim, n_actions))
    reports = ablation_run(exp, model, config_mod.train_config(cfg))
    for arm, rep in reports.items():
        print(f"{arm}: {rep.table_row()} | average F1={100 * rep.average_f1:.1f}")
    with _Output(args.out) as out:
        atomic_write(out, ablation_csv(reports))
        _write_manifest(out, "ablate", cfg, {"data": args.data, "test": args.test})
    return 0


def cmd_sweep(args) -> int:
    cfg = _cfg(args)
    model = _model(args, cfg)
    train_ds = _data(args.data, "dataset", cfg)
    pool = _data(args.test, "test", cfg, "--test")
    sizes = _int_list(args.sizes)
    if args.fractions:
        mean_len = float(np.mean([len(t) for t in train_ds]))
        sizes = sorted({max(2, int(round(float(f) * mean_len))) for f in args.fractions.split(",")})
    if not sizes:
        raise ConfigError("give --sizes or --fractions")
    rows = window_sweep(experiment(cfg, train_ds, pool), model, sizes, args.vary)
    text = rows_csv(rows)
    with _Output(args.out) as out:
        atomic_write(out, text)
        _write_manifest(out, "sweep", cfg, {"model": args.model, "data": args.data, "test": args.test})
    sys.stdout.write(text)
    return 0


def _int_list(text: str | None) -> list[int]:
    if not text:
        return []
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def cmd_verify_values(args) -> int:
    cfg = _cfg(args)
    env, tables = environment(cfg)
    model = _model(args, cfg)
    ds = _data(args.data, "test", cfg)
    truth = mc_first_visit(env, tables, args.episodes, seed=int(cfg["data"]["seed"]))
    missing = {s for t in ds for s in (t.state_ids or [])[:len(t)] if s not in truth}
    if missing:
        # states the expert never visits from its start distribution
        exact = value_iteration(env).V
        truth.update({s: float(exact[s]) for s in missing})
    result = {}
    for name, subset in (("expert", ds.normal()), ("anomalous", Dataset(t for t in ds if t.is_anomaly))):
        if len(subset):
            pcc, scc = value_correlation(model, env, subset, truth)
            result[name] = {"pcc": pcc, "scc": scc, "trajectories": len(subset)}
            print(f"{name}: PCC={pcc:.3f} SCC={scc:.3f} over {len(subset)} trajectories")
    if args.out:
        with _Output(args.out) as out:
            atomic_write(out, _dump_json(result))
            _write_manifest(out, "verify-values", cfg, {"model": args.model, "data": args.data})
    return 0


def cmd_check_theorem(args) -> int:
    cfg = _cfg(args)
    gammas = [float(g) for g in args.gammas.split(",")]
    rows, ok = [], True
    if cfg["env"]["grid_file"]:
        base = load_grid_file(cfg["env"]["grid_file"])
    else:
        base = builtin_grid(cfg["env"]["name"])
    for terminal in (0.0, float(args.terminal_reward)):
        for gamma in gammas:
            grid = replace(base, discount=gamma, goals={c: terminal for c in base.goals})
            env = grid.compile()
            tables = value_iteration(env)
            cond = mono = closed = True
            for s in env.start_states:
                t = greedy_rollout(env, tables, int(s))
                v = tables.V[t.state_ids[:len(t)]]
                cond &= all(theorem1_check(t.meta["rewards"], gamma))
                mono &= bool(np.all(np.diff(v) > 0))
                closed &= bool(np.allclose(v, remark_values(len(t), gamma, grid.step_reward, terminal),
                                           rtol=0, atol=1e-9))
            rows.append({"gamma": gamma, "terminal_reward": terminal, "condition": cond,
                         "strictly_increasing": mono, "closed_form": closed})
            ok &= cond and mono and closed
            print(f"gamma={gamma} terminal={terminal}: condition={cond} increasing={mono} closed_form={closed}")
    if args.out:
        with _Output(args.out) as out:
            atomic_write(out, _dump_json(rows))
            _write_manifest(out, "check-theorem", cfg, {})
    return 0 if ok else 1


def cmd_plot_data(args) -> int:
    cfg = _cfg(args)
    model = _model(args, cfg)
    ds = _data(args.data, "test", cfg)
    if args.kind == "latent":
        text = features_csv(dataset_features(model, ds, config_mod.window_config(cfg)))
    else:
        env, tables = environment(cfg)
        lines = ["traj_id,t,label,v_model,v_true"]
        for t in ds:
            if len(t) == 0:
                continue
            v = state_values(model.q_values(t.states))
            for i, s in enumerate((t.state_ids or [])[:len(t)]):
                lines.append(f"{t.id},{i},{t.label},{v[i]!r},{float(tables.V[s])!r}")
        text = "\n".join(lines) + "\n"
    with _Output(args.out) as out:
        atomic_write(out, text)
        _write_manifest(out, f"plot-data {args.kind}", cfg, {"model": args.model, "data": args.data})
    print(f"wrote {args.out}")
    return 0


# -- parser -------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oilad", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"oilad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML run configuration")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a configuration field (repeatable)")
        p.set_defaults(func=func)
        return p

    p = command("gen", cmd_gen, "generate a training set or a labelled test pool")
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")

    p = command("train", cmd_train, "fit the policy network to normal trajectories")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.add_argument("--history", help="loss history CSV")
    p.add_argument("--actions", type=int, help="action count (default: from the environment)")

    p = command("features", cmd_features, "dump window features as CSV")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = command("fit-boundary", cmd_fit_boundary, "fit the isolation forest on training features")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = command("score", cmd_score, "flag trajectories (or a live stream with --follow)")
    p.add_argument("--model")
    p.add_argument("--forest")
    p.add_argument("--data")
    p.add_argument("--out")
    p.add_argument("--follow", action="store_true", help="read per-step JSON lines from stdin")

    p = command("eval", cmd_eval, "precision / recall / F1 per anomaly class")
    p.add_argument("--model")
    p.add_argument("--forest")
    p.add_argument("--data")
    p.add_argument("--out", required=True)

    p = command("ablate", cmd_ablate, "train and compare the objective ablation arms")
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--out", required=True)
    p.add_argument("--actions", type=int)

    p = command("sweep", cmd_sweep, "F1 against sliding-window size")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--test")
    p.add_argument("--sizes", help="comma-separated window sizes")
    p.add_argument("--fractions", help="comma-separated fractions of the mean trajectory length")
    p.add_argument("--vary", choices=("w_q", "w_v", "both"), default="both")
    p.add_argument("--out", required=True)

    p = command("verify-values", cmd_verify_values, "correlate learned and Monte-Carlo state values")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--episodes", type=int, default=2000)
    p.add_argument("--out")

    p = command("check-theorem", cmd_check_theorem,
                "check value monotonicity along optimal gridworld trajectories")
    p.add_argument("--gammas", default="0.5,0.9,0.99")
    p.add_argument("--terminal-reward", type=float, default=10.0)
    p.add_argument("--out")

    p = command("plot-data", cmd_plot_data, "CSV data behind the latent-space and value plots")
    p.add_argument("kind", choices=("latent", "values"))
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except OiladError as exc:
        print(f"oilad {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, OSError) as exc:
        print(f"oilad {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
