"""``tk``: run overlay nodes on the host network, or the emulated benchmarks and attacks."""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import logging
import sys
from pathlib import Path

from .multipath import PathValidationError, Policy, parse_paths
from .nodes import Gateway, Node, NodeConfig, NodeRole, RealNet, parse_addr
from .channels import ConfigError

log = logging.getLogger("tk")


async def _serve_forever(node: Node) -> None:
    try:
        await asyncio.Event().wait()
    finally:
        await node.stop()


async def _run_node(cfg: NodeConfig) -> None:
    node = Node(cfg, RealNet())
    await node.start()
    ident = cfg.identity
    log.info("%s %d listening on %s:%d", ident.role.value, ident.node_id, ident.host, ident.port)
    await _serve_forever(node)


async def _run_gateway(cfg: NodeConfig, paths, listen: tuple[str, int], policy: Policy) -> None:
    gw = Gateway(cfg, paths, RealNet(), policy)
    await gw.serve_socks(listen[1], listen[0])
    log.info("gateway %d: SOCKS5 on %s:%d over %d path(s)", cfg.identity.node_id, *listen, len(paths))
    await _serve_forever(gw)


def _load_node(args, role: NodeRole) -> NodeConfig:
    cfg = NodeConfig.load(args.config)
    if cfg.identity.role is not role:
        raise ConfigError(f"{args.config}: node {cfg.identity.node_id} is a {cfg.identity.role.value}, "
                          f"not a {role.value}")
    return cfg


def cmd_gateway(args) -> int:
    cfg = _load_node(args, NodeRole.GATEWAY)
    if args.paths:
        paths = parse_paths(Path(args.paths).read_text())
    elif cfg.bridge is not None:
        from .multipath import PathSpec
        paths = [PathSpec(0, (cfg.bridge,))]
    else:
        raise ConfigError("gateway needs --paths or a bridge in its config")
    unknown = sorted({h for p in paths for h in p.hops if h not in cfg.deployment})
    if unknown:
        raise PathValidationError(f"paths name nodes missing from the deployment: {unknown}")
    asyncio.run(_run_gateway(cfg, paths, parse_addr(args.socks_listen), Policy(args.policy)))
    return 0


def cmd_proxy(args) -> int:
    asyncio.run(_run_node(_load_node(args, NodeRole.PROXY)))
    return 0


def cmd_bridge(args) -> int:
    cfg = _load_node(args, NodeRole.BRIDGE)
    if args.upstream:
        cfg = dataclasses.replace(cfg, upstream=parse_addr(args.upstream))
    asyncio.run(_run_node(cfg))
    return 0


def cmd_bench(args) -> int:
    from .harness.experiments import (ExperimentSpec, emit_report, run_latency, run_throughput,
                                      run_users, users_rows)
    spec = ExperimentSpec.load(args.spec) if args.spec else ExperimentSpec()
    if args.seed is not None:
        spec.seed = args.seed
    which = set(args.only.split(",")) if args.only else {"throughput", "latency", "users"}
    rows = []
    if "throughput" in which:
        rows += run_throughput(spec)
    if "latency" in which:
        rows += run_latency(spec)
    if "users" in which:
        for n in spec.users:
            for r in range(spec.repeats):
                rows += users_rows(run_users(spec, n, r), n, r)
    csv_path, json_path = emit_report(rows, args.out, {"seed": spec.seed})
    print(f"wrote {csv_path} and {json_path}")
    return 0


def cmd_attack(args) -> int:
    from .harness.attack_suite import AttackSpec, run_attack_suite
    from .harness.experiments import emit_report
    spec = AttackSpec.load(args.spec) if args.spec else AttackSpec()
    if args.seed is not None:
        spec.seed = args.seed
    report = run_attack_suite(spec)
    extra = dict(report.summary(), seed=spec.seed)
    csv_path, json_path = emit_report(report.rows(spec.seed), args.out, extra)
    if not args.no_traces:
        report.save_traces(args.out)
    for r in report.results:
        verdict = f" {r.verdict.value}" if r.verdict else ""
        print(f"{r.experiment:<12} {r.config:<22} auc={r.metrics.auc:.3f} "
              f"acc={r.metrics.accuracy:.3f} fpr={r.metrics.fpr:.3f}{verdict}")
    print(f"wrote {csv_path} and {json_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tk", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gateway", help="SOCKS5 front end that carries streams over the overlay")
    g.add_argument("--config", required=True)
    g.add_argument("--socks-listen", default="127.0.0.1:1080")
    g.add_argument("--paths", help="one path per line: 'path_id: node,...,node [weight]'")
    g.add_argument("--policy", default="ROUND_ROBIN", choices=[x.value for x in Policy])
    g.set_defaults(func=cmd_gateway)

    x = sub.add_parser("proxy", help="relay node")
    x.add_argument("--config", required=True)
    x.set_defaults(func=cmd_proxy)

    b = sub.add_parser("bridge", help="terminal node; forwards to --upstream or the destination")
    b.add_argument("--config", required=True)
    b.add_argument("--upstream")
    b.set_defaults(func=cmd_bridge)

    for name, fn, helptext in (("bench", cmd_bench, "throughput, latency and user-scaling runs"),
                               ("attack", cmd_attack, "passive and active correlation attacks")):
        c = sub.add_parser(name, help=helptext)
        c.add_argument("--spec", help="YAML spec; defaults apply when omitted")
        c.add_argument("--out", required=True)
        c.add_argument("--seed", type=int)
        c.set_defaults(func=fn)
    sub.choices["bench"].add_argument("--only", help="comma list of throughput,latency,users")
    sub.choices["attack"].add_argument("--no-traces", action="store_true",
                                       help="skip the per-tap trace CSVs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, PathValidationError, OSError) as e:
        print(f"tk: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
