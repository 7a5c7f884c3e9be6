"""Command-line entry point for reproducible experiment runs.

Exit codes: 0 success, 1 validation error, 2 non-convergence.
All randomness flows from a single --seed; per-component streams are derived
with fixed labels so identical invocations produce byte-identical files.
"""

import argparse
import sys

import numpy as np

from . import dataset as ds
from .batchrl import CostSelector, fqe, fqi, lspi, lspi_policy
from .funcapprox import QFunction, one_hot_features
from .learner import (LearnerConfig, MixturePolicy, derandomize, run,
                      write_trace_csv)
from .mdp import DeterministicPolicy, build_frozenlake, FROZENLAKE_8X8
from .onlineopt import EG_FLAVOR, OGD_FLAVOR
from .ope import OpeConfig, ope_comparison, write_ope_report
from .oracle import exact_constrained_optimum, exact_policy_values

# Fixed labels for deriving independent seed streams from the single --seed.
_STREAM_COLLECT = 1
_STREAM_LEARN = 2
_STREAM_OPE = 3


class ValidationError(Exception):
    pass


def _stream(seed, label):
    return np.random.default_rng(np.random.SeedSequence([int(seed), label]))


def _load_map(spec, gamma):
    if spec == "8x8":
        return build_frozenlake(FROZENLAKE_8X8, gamma=gamma)
    try:
        with open(spec, "r", encoding="utf-8") as fh:
            layout = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read map file: {exc}") from None
    try:
        return build_frozenlake(layout, gamma=gamma)
    except ValueError as exc:
        raise ValidationError(f"bad map file {spec}: {exc}") from None


def _parse_cost(text):
    if text == "c":
        return CostSelector.primary()
    if text.startswith("g:"):
        return CostSelector.constraint(int(text[2:]) - 1)
    if text.startswith("scalarized:"):
        lam = np.array([float(v) for v in text[len("scalarized:"):].split(",")])
        return CostSelector.scalarized(lam)
    raise ValidationError("cost must be c, g:<i>, or scalarized:<lam csv>")


def save_policy(policy, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("state,action\n")
        for x, a in enumerate(policy.actions):
            fh.write(f"{x},{a}\n")


def save_mixture(mixture, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("member,weight,state,action\n")
        for i, (policy, w) in enumerate(zip(mixture.members, mixture.weights)):
            for x, a in enumerate(policy.actions):
                fh.write(f"{i},{w:.17g},{x},{a}\n")


def load_policy(path):
    """Load a deterministic policy or a mixture, depending on the header."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            header = fh.readline().strip()
            rows = [line.strip().split(",") for line in fh if line.strip()]
    except OSError as exc:
        raise ValidationError(f"cannot read policy file: {exc}") from None
    if header == "state,action":
        S = max(int(r[0]) for r in rows) + 1
        actions = np.zeros(S, dtype=np.int64)
        for r in rows:
            actions[int(r[0])] = int(r[1])
        return DeterministicPolicy(actions)
    if header == "member,weight,state,action":
        members = {}
        weights = {}
        for r in rows:
            i, w, x, a = int(r[0]), float(r[1]), int(r[2]), int(r[3])
            members.setdefault(i, {})[x] = a
            weights[i] = w
        policies = []
        counts = []
        total = sum(weights.values())
        scale = 10 ** 9
        for i in sorted(members):
            S = max(members[i]) + 1
            actions = np.zeros(S, dtype=np.int64)
            for x, a in members[i].items():
                actions[x] = a
            policies.append(DeterministicPolicy(actions))
            counts.append(max(1, round(weights[i] / total * scale)))
        m_placeholder = [np.zeros(0)] * len(policies)
        return MixturePolicy(policies, counts, [0.0] * len(policies),
                             m_placeholder)
    raise ValidationError(f"unrecognized policy file header: {header!r}")


def _cmd_collect(args):
    mdp = _load_map(args.map, args.gamma)
    behavior = ds.make_frozenlake_behavior(mdp, args.epsilon)
    rng = _stream(args.seed, _STREAM_COLLECT)
    data = ds.collect(mdp, behavior, args.trajs, args.horizon, rng)
    ds.save(data, args.out)
    print(f"wrote {len(data)} transitions over {data.num_trajectories} "
          f"trajectories to {args.out}")
    return 0


def _resolve_learn_config(args, m):
    return LearnerConfig(
        B=args.B, eta=args.eta, omega=args.omega,
        tau=np.array([float(v) for v in args.tau.split(",")]),
        K_fqi=args.iters_fqi, K_fqe=args.iters_fqe,
        max_rounds=args.rounds, ridge=args.ridge, seed=args.seed,
        dual_flavor={"eg": EG_FLAVOR, "ogd": OGD_FLAVOR}[args.dual],
        subroutine_flavor=args.flavor, gamma=args.gamma)


def _cmd_learn(args):
    data = ds.load(args.data) if args.data else None
    mdp = _load_map(args.map, args.gamma) if args.map else None
    if args.flavor == "exact" and mdp is None:
        raise ValidationError("--flavor exact requires --map")
    if args.flavor != "exact" and data is None:
        raise ValidationError(f"--flavor {args.flavor} requires --data")
    config = _resolve_learn_config(args, data.m if data is not None else None)
    mixture, trace = run(data, config, mdp_handle=mdp)
    if args.trace_out:
        write_trace_csv(trace, args.trace_out, len(config.tau))
    if args.policy_out:
        if args.derandomize:
            policy, idx = derandomize(mixture, config.tau)
            save_policy(policy, args.policy_out)
        else:
            save_mixture(mixture, args.policy_out)
    final_gap = float(trace.gap[-1]) if len(trace.gap) else float("nan")
    print(f"rounds={trace.total_rounds} converged={trace.converged} "
          f"final_gap={final_gap:.6g}")
    return 0 if trace.converged else 2


def _fitted_common(args, need_policy=False):
    data = ds.load(args.data)
    mdp = _load_map(args.map, args.gamma) if args.map else None
    gamma = mdp.gamma if mdp else args.gamma
    S = (mdp.num_states if mdp
         else int(max(data.x.max(), data.x_next.max())) + 1)
    A = mdp.num_actions if mdp else int(data.a.max()) + 1
    template = QFunction.tabular_zeros(S, A)
    return data, mdp, gamma, template


def _cmd_fqe(args):
    data, mdp, gamma, template = _fitted_common(args)
    policy = load_policy(args.policy)
    est, run_info = fqe(data, policy, _parse_cost(args.cost), args.iters,
                        template, ridge=args.ridge, gamma=gamma, mdp=mdp)
    print(f"estimate,{est:.17g}")
    return 0


def _cmd_fqi(args):
    data, mdp, gamma, template = _fitted_common(args)
    policy, _ = fqi(data, _parse_cost(args.cost), args.iters, template,
                    ridge=args.ridge, gamma=gamma, mdp=mdp)
    if args.policy_out:
        save_policy(policy, args.policy_out)
    else:
        sys.stdout.write("state,action\n")
        for x, a in enumerate(policy.actions):
            sys.stdout.write(f"{x},{a}\n")
    return 0


def _cmd_lspi(args):
    data, mdp, gamma, _ = _fitted_common(args)
    if mdp is None:
        raise ValidationError("lspi needs --map to build one-hot features")
    features = one_hot_features(mdp)
    result = lspi(data, _parse_cost(args.cost), features, gamma,
                  eps_stop=args.eps, max_iters=args.iters, ridge=args.ridge)
    policy = lspi_policy(result.weights, features)
    if args.policy_out:
        save_policy(policy, args.policy_out)
    else:
        sys.stdout.write("state,action\n")
        for x, a in enumerate(policy.actions):
            sys.stdout.write(f"{x},{a}\n")
    return 0 if result.converged else 2


def _cmd_oracle(args):
    mdp = _load_map(args.map, args.gamma)
    policy = load_policy(args.policy)
    C, G = exact_policy_values(mdp, policy)
    header = "C" + "".join(f",G_{i + 1}" for i in range(mdp.m))
    values = f"{C:.17g}" + "".join(f",{v:.17g}" for v in G)
    print(header)
    print(values)
    return 0


def _cmd_ope_compare(args):
    data = ds.load(args.data)
    mdp = _load_map(args.map, args.gamma)
    policy = load_policy(args.policy)
    fractions = [float(v) for v in args.fractions.split(",")]
    if any(not 0 < f <= 1 for f in fractions):
        raise ValidationError("fractions must lie in (0, 1]")
    derived = np.random.SeedSequence([args.seed, _STREAM_OPE])
    config = OpeConfig(fqe_iters=args.iters, ridge=args.ridge,
                       seed=int(derived.generate_state(1)[0]),
                       jobs=args.jobs)
    rows = ope_comparison(data, policy, mdp, fractions, args.trials, config)
    write_ope_report(rows, args.out)
    print(f"wrote {len(rows)} rows to {args.out}")
    return 0


def _cmd_frozenlake_experiment(args):
    import os
    os.makedirs(args.outdir, exist_ok=True)
    mdp = _load_map("8x8", args.gamma)
    behavior = ds.make_frozenlake_behavior(mdp, args.epsilon)
    rng = _stream(args.seed, _STREAM_COLLECT)
    data = ds.collect(mdp, behavior, args.trajs, args.horizon, rng)
    ds.save(data, os.path.join(args.outdir, "dataset.csv"))

    tau = np.array([args.tau])
    config = LearnerConfig(B=args.B, eta=args.eta, omega=args.omega, tau=tau,
                           max_rounds=args.rounds, seed=args.seed,
                           subroutine_flavor="fitted", gamma=args.gamma)
    mixture, trace = run(data, config, mdp_handle=mdp)
    write_trace_csv(trace, os.path.join(args.outdir, "trace.csv"), 1)
    save_mixture(mixture, os.path.join(args.outdir, "mixture.csv"))
    with open(os.path.join(args.outdir, "values.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("member,weight,C_hat,G_hat_1\n")
        for i, w in enumerate(mixture.weights):
            fh.write(f"{i},{w:.17g},{mixture.member_c_hat[i]:.17g},"
                     f"{mixture.member_g_hat[i][0]:.17g}\n")

    c_mix, g_mix = exact_policy_values(mdp, mixture)
    c_behavior, g_behavior = exact_policy_values(mdp, behavior)
    try:
        c_star, opt_mixture = exact_constrained_optimum(
            mdp, tau, args.B, args.eta, args.omega)
        _, g_star = exact_policy_values(mdp, opt_mixture)
        opt_line = f"exact_constrained_optimum,{c_star:.6g},{g_star[0]:.6g}\n"
    except Exception as exc:  # non-convergence of the oracle run
        opt_line = f"exact_constrained_optimum,failed ({exc}),\n"
    with open(os.path.join(args.outdir, "report.csv"), "w",
              encoding="utf-8") as fh:
        fh.write("policy,exact_C,exact_G_1\n")
        fh.write(f"learned_mixture,{c_mix:.6g},{g_mix[0]:.6g}\n")
        fh.write(f"behavior,{c_behavior:.6g},{g_behavior[0]:.6g}\n")
        fh.write(opt_line)
    final_gap = float(trace.gap[-1]) if len(trace.gap) else float("nan")
    print(f"rounds={trace.total_rounds} converged={trace.converged} "
          f"final_gap={final_gap:.6g} exact_C={c_mix:.6g} "
          f"exact_G={g_mix[0]:.6g}")
    return 0 if trace.converged else 2


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cbpl",
        description="Constrained batch policy learning toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--gamma", type=float, default=0.95)

    p = sub.add_parser("collect", help="roll out the behavior policy")
    p.add_argument("--map", default="8x8")
    p.add_argument("--trajs", type=int, default=5000)
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=0.95)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_collect)

    p = sub.add_parser("learn", help="run the constrained learner")
    p.add_argument("--data")
    p.add_argument("--map")
    p.add_argument("--tau", default="0.1")
    p.add_argument("--B", type=float, default=30.0)
    p.add_argument("--eta", type=float, default=50.0)
    p.add_argument("--omega", type=float, default=0.05)
    p.add_argument("--iters-fqi", type=int, default=100)
    p.add_argument("--iters-fqe", type=int, default=100)
    p.add_argument("--rounds", type=int, default=200)
    p.add_argument("--dual", choices=["eg", "ogd"], default="eg")
    p.add_argument("--flavor", choices=["fitted", "lspi", "exact"],
                   default="fitted")
    p.add_argument("--ridge", type=float, default=1e-8)
    p.add_argument("--trace-out")
    p.add_argument("--policy-out")
    p.add_argument("--derandomize", action="store_true")
    add_common(p)
    p.set_defaults(func=_cmd_learn)

    for name, func, needs_policy in (("fqe", _cmd_fqe, True),
                                     ("fqi", _cmd_fqi, False),
                                     ("lspi", _cmd_lspi, False)):
        p = sub.add_parser(name, help=f"run {name} on a dataset")
        p.add_argument("--data", required=True)
        p.add_argument("--map")
        p.add_argument("--cost", default="c")
        p.add_argument("--iters", type=int, default=100 if name != "lspi" else 50)
        p.add_argument("--ridge", type=float, default=1e-8)
        if needs_policy:
            p.add_argument("--policy", required=True)
        else:
            p.add_argument("--policy-out")
        if name == "lspi":
            p.add_argument("--eps", type=float, default=1e-6)
        add_common(p)
        p.set_defaults(func=func)

    p = sub.add_parser("oracle", help="exact policy values on a map")
    p.add_argument("--map", required=True)
    p.add_argument("--policy", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_oracle)

    p = sub.add_parser("ope-compare", help="subsampling estimator comparison")
    p.add_argument("--data", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--policy", required=True)
    p.add_argument("--fractions",
                   default="0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--ridge", type=float, default=1e-8)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_ope_compare)

    p = sub.add_parser("frozenlake-experiment",
                       help="end-to-end safety experiment pipeline")
    p.add_argument("--outdir", required=True)
    p.add_argument("--trajs", type=int, default=5000)
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--epsilon", type=float, default=0.95)
    p.add_argument("--tau", type=float, default=0.1)
    p.add_argument("--B", type=float, default=30.0)
    p.add_argument("--eta", type=float, default=50.0)
    p.add_argument("--omega", type=float, default=0.05)
    p.add_argument("--rounds", type=int, default=200)
    add_common(p)
    p.set_defaults(func=_cmd_frozenlake_experiment)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 1 if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValidationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
