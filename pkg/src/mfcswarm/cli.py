"""Command-line driver.

    mfcswarm train   --config run.toml [--seed S] [--out DIR] [--checkpoint DIR]
    mfcswarm eval    --config run.toml --checkpoint DIR [--agents 25,50] [--episodes 50]
    mfcswarm openloop --config run.toml --checkpoint DIR --mode replay_sequence
    mfcswarm chaos   [--config run.toml]
    mfcswarm bench   [--config run.toml]
    mfcswarm export-frames --config run.toml [--checkpoint DIR] [--embed]

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import envs, limit_oracle, manifolds, nn, ppo
from .config import ConfigError, RunConfig
from .features import featurize
from .policies import act, lower_from_xi, upper_act

log = logging.getLogger("mfcswarm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
EVAL_COLUMNS = ["mode", "N", "episode", "return", "final_R", "return_ci95", "final_R_ci95"]
BENCH_COLUMNS = ["d", "mode", "features", "mean_step_s", "std_step_s"]
FRAME_COLUMNS = ["t", "agent_id", "px", "py", "phi", "R", "reward"]
TIMING_COLUMNS = ["iteration", "wall_time_s"]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvLog:
    """Append-only CSV with a fixed header."""

    def __init__(self, path: Path, columns: list[str], append: bool = False):
        self.columns = columns
        exists = append and path.exists()
        self.fh = open(path, "a" if exists else "w", newline="")
        self.w = csv.writer(self.fh, lineterminator="\n")
        if not exists:
            self.w.writerow(columns)

    def row(self, values: dict) -> None:
        self.w.writerow([_fmt(values.get(c, "")) for c in self.columns])
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


def _truncate_csv(path: Path, keep_iterations: int) -> None:
    # on resume, drop rows written after the checkpoint we restart from
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= keep_iterations]
    path.write_text("".join(kept))


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def train(cfg: RunConfig, out: Path, resume: Path | None = None) -> ppo.Trainer:
    """Run training; writes metrics.csv, timing.csv, config.toml and checkpoints under ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg, out / "config.toml")
    trainer = ppo.Trainer(cfg.setup(), cfg.ppo, cfg.run.seed, cfg.policy.hidden, cfg.policy.init_log_std)
    if resume is not None:
        trainer.load(resume)
        _truncate_csv(out / "metrics.csv", trainer.iteration)
        _truncate_csv(out / "timing.csv", trainer.iteration)
    metrics = CsvLog(out / "metrics.csv", ppo.METRICS_COLUMNS, append=resume is not None)
    timing = CsvLog(out / "timing.csv", TIMING_COLUMNS, append=resume is not None)
    try:
        while trainer.iteration < cfg.ppo.iterations:
            m, _ = trainer.step()
            metrics.row(m)
            timing.row(m)
            log.info("iter %d return %.3f final_R %.3f kl %.4f", m["iteration"], m["mean_return"],
                     m["mean_final_R"], m["approx_kl"])
            every = cfg.ppo.checkpoint_every
            if (every and trainer.iteration % every == 0) or trainer.iteration == cfg.ppo.iterations:
                trainer.save(out / "checkpoints" / f"iter_{trainer.iteration:05d}")
                trainer.save(out / "checkpoint")
    finally:
        metrics.close()
        timing.close()
    return trainer


def load_policy(cfg: RunConfig, checkpoint: Path) -> nn.Mlp:
    policy, _ = nn.load_mlp(Path(checkpoint) / "policy.bin")
    setup = cfg.setup()
    want = [setup.features.size, *cfg.policy.hidden, 2 * setup.xi.dim]
    if policy.sizes != want:
        raise ValueError(f"checkpoint network {policy.sizes} does not match configuration {want}")
    return policy


# ---------------------------------------------------------------------------
# eval / openloop
# ---------------------------------------------------------------------------


def _agent_list(text: str | None, default: list[int]) -> list[int]:
    if not text:
        return list(default)
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigError(f"--agents expects comma-separated integers, got {text!r}") from exc
    if not vals or min(vals) < 1:
        raise ConfigError("--agents values must be >= 1")
    return vals


def evaluation_rows(cfg: RunConfig, policy: nn.Mlp, agents: list[int], episodes: int,
                    modes: list[str], greedy: bool = True) -> list[dict]:
    rows = []
    for mode in modes:
        for n in agents:
            c = cfg.replace(env={"n_agents": n})
            res = ppo.evaluate(c.setup(), policy, episodes, cfg.run.seed, greedy=greedy, mode=mode)
            for k, r in enumerate(res):
                rows.append({"mode": mode, "N": n, "episode": k, "return": r.ret, "final_R": r.final_R})
            mr, hr = ppo.mean_ci95([r.ret for r in res])
            mf, hf = ppo.mean_ci95([r.final_R for r in res])
            rows.append({"mode": mode, "N": n, "episode": "summary", "return": mr, "final_R": mf,
                         "return_ci95": hr, "final_R_ci95": hf})
    return rows


def write_rows(path: Path, columns: list[str], rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    w = CsvLog(path, columns)
    for r in rows:
        w.row(r)
    w.close()


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def bench_config(d: int, mode: str) -> RunConfig:
    """N=50 Aggregation in d dimensions with either per-axis RBF or histogram representations."""
    env = envs.aggregation_config(dim=d, n_agents=50)
    if mode == "rbf_per_axis":
        feats = cfgmod.FeatureConfig(mode="rbf", per_axis=True)
        pol = cfgmod.PolicyConfig(obs_mode="rbf", per_axis=True)
    elif mode == "histogram":
        feats = cfgmod.FeatureConfig(mode="histogram")
        pol = cfgmod.PolicyConfig(obs_mode="histogram")
    else:
        raise ConfigError(f"unknown bench mode {mode!r}")
    return RunConfig(env=env, features=feats, policy=pol)


def bench_step_times(cfg: RunConfig, steps: int, seed: int = 0) -> tuple[int, np.ndarray]:
    """Per-step wall time of the rollout loop (featurise, upper and lower policy, env step)."""
    setup = cfg.setup()
    policy, _ = ppo.build_networks(setup, cfg.policy.hidden, seed)
    rng = np.random.default_rng(seed)
    state, obs = envs.reset(setup.env, rng)
    times = np.empty(steps)
    for t in range(steps):
        t0 = time.perf_counter()
        f = featurize(state, setup.features, setup.env.space, setup.env.horizon)
        xi = upper_act(policy, f, rng).xi
        a, _ = act(lower_from_xi(xi, setup.xi), obs, rng)
        o = envs.step(state, a, setup.env, rng)
        state, obs = (o.state, o.observations) if not o.done else envs.reset(setup.env, rng)
        times[t] = time.perf_counter() - t0
    return setup.features.n_anchors, times


def bench_rows(dims: list[int], steps: int, modes=("rbf_per_axis", "histogram")) -> list[dict]:
    rows = []
    for d in dims:
        if d not in (2, 3, 4, 5):
            raise ConfigError("bench dimensions must be in {2, 3, 4, 5}")
        for mode in modes:
            n_feat, times = bench_step_times(bench_config(d, mode), steps)
            rows.append({"d": d, "mode": mode, "features": n_feat,
                         "mean_step_s": float(times.mean()), "std_step_s": float(times.std())})
    return rows


# ---------------------------------------------------------------------------
# export frames
# ---------------------------------------------------------------------------


def frame_rows(cfg: RunConfig, policy: nn.Mlp | None, embed: bool) -> tuple[list[str], list[dict]]:
    """One greedy episode (or random xi without a policy), one row per agent and step."""
    setup = cfg.setup()
    e = setup.env
    if embed and e.manifold == "box":
        raise ConfigError("3D embedding is undefined for the box")
    if e.dim != 2:
        raise ConfigError("frame export needs a two-dimensional state space")
    rng = ppo.episode_rng(cfg.run.seed, 0)
    state, obs = envs.reset(e, rng)
    columns = FRAME_COLUMNS + (["X", "Y", "Z"] if embed else [])
    rows = []
    for t in range(e.horizon + 1):
        R = envs.polar_order(state) if state.headings is not None else math.nan
        xyz = manifolds.embed3d(e.manifold, state.positions) if embed else None
        if t < e.horizon:
            if policy is None:
                xi = rng.uniform(-1.0, 1.0, setup.xi.dim)
            else:
                xi = upper_act(policy, featurize(state, setup.features, e.space, e.horizon), rng, greedy=True).xi
            a, _ = act(lower_from_xi(xi, setup.xi), obs, rng)
            o = envs.step(state, a, e, rng)
            r = o.reward
        else:
            o, r = None, math.nan
        for i in range(state.positions.shape[0]):
            row = {"t": t, "agent_id": i, "px": float(state.positions[i, 0]), "py": float(state.positions[i, 1]),
                   "phi": float(state.headings[i]) if state.headings is not None else math.nan,
                   "R": R, "reward": r}
            if embed:
                row.update(X=float(xyz[i, 0]), Y=float(xyz[i, 1]), Z=float(xyz[i, 2]))
            rows.append(row)
        if o is not None:
            state, obs = o.state, o.observations
    return columns, rows


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mfcswarm", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=False):
        sp.add_argument("--config", type=Path, help="TOML run configuration")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--out", type=Path, help="override [run] out_dir")
        if checkpoint:
            sp.add_argument("--checkpoint", type=Path, required=True, help="checkpoint directory")

    sp = sub.add_parser("train", help="train the upper-level policy")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, help="resume from this checkpoint directory")

    for name, help_ in (("eval", "closed-loop evaluation across agent counts"),
                        ("openloop", "open-loop evaluation against closed loop")):
        sp = sub.add_parser(name, help=help_)
        common(sp, checkpoint=True)
        sp.add_argument("--agents", help="comma-separated agent counts")
        sp.add_argument("--episodes", type=int, help="episodes per agent count")
        sp.add_argument("--stochastic", action="store_true", help="sample xi instead of using the mean")
        if name == "openloop":
            sp.add_argument("--mode", choices=["replay_sequence", "freeze_t0"], default="replay_sequence")

    sp = sub.add_parser("chaos", help="propagation-of-chaos sweep on the finite toy system")
    common(sp)
    sp = sub.add_parser("bench", help="per-step time of rbf_per_axis vs histogram in d-dim Aggregation")
    common(sp)
    sp = sub.add_parser("export-frames", help="per-agent CSV of one episode")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, help="policy to roll out (random xi if omitted)")
    sp.add_argument("--embed", action="store_true", help="add 3D embedding columns X, Y, Z")
    return p


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if args.out is not None:
        over["out_dir"] = str(args.out)
    return cfg.replace(run=over) if over else cfg


def run(args) -> int:
    cfg = resolve_config(args)
    out = Path(cfg.run.out_dir)
    if args.command == "train":
        train(cfg, out, args.checkpoint)
    elif args.command in ("eval", "openloop"):
        episodes = cfg.run.eval_episodes if args.episodes is None else args.episodes
        if episodes < 1:
            raise ConfigError("--episodes must be >= 1")
        policy = load_policy(cfg, args.checkpoint)
        if args.command == "eval":
            agents = _agent_list(args.agents, cfg.run.eval_agents)
            rows = evaluation_rows(cfg, policy, agents, episodes, ["closed_loop"], not args.stochastic)
            write_rows(out / "eval.csv", EVAL_COLUMNS, rows)
        else:
            agents = _agent_list(args.agents, [cfg.env.n_agents])
            rows = evaluation_rows(cfg, policy, agents, episodes, ["closed_loop", args.mode], not args.stochastic)
            write_rows(out / "openloop.csv", EVAL_COLUMNS, rows)
        for r in rows:
            if r["episode"] == "summary":
                print(f"{r['mode']} N={r['N']}: return {r['return']:.3f} ± {r['return_ci95']:.3f}, "
                      f"final R {r['final_R']:.3f} ± {r['final_R_ci95']:.3f}")
    elif args.command == "chaos":
        meta = cfg.run
        system = limit_oracle.toy_system()
        rows = limit_oracle.chaos_sweep(system, limit_oracle.default_policies(system, meta.chaos_horizon),
                                        sorted(meta.chaos_agents), meta.chaos_horizon,
                                        meta.chaos_replications, np.random.default_rng(meta.seed))
        out.mkdir(parents=True, exist_ok=True)
        limit_oracle.write_chaos_csv(rows, out / "chaos.csv")
        print(f"log-log slope {limit_oracle.chaos_slope(rows):.3f}")
    elif args.command == "bench":
        rows = bench_rows(cfg.run.bench_dims, cfg.run.bench_steps)
        write_rows(out / "bench.csv", BENCH_COLUMNS, rows)
        for r in rows:
            print(f"d={r['d']} {r['mode']}: {r['features']} features, {r['mean_step_s'] * 1e3:.2f} ms/step")
    elif args.command == "export-frames":
        policy = load_policy(cfg, args.checkpoint) if args.checkpoint else None
        columns, rows = frame_rows(cfg, policy, args.embed)
        write_rows(out / "frames.csv", columns, rows)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError, FloatingPointError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
