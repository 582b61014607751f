"""Command-line client for the service.

Every subcommand builds a request and sends it through the HTTP API: against
a remote server when ``--server`` is given, otherwise against the FastAPI app
mounted in-process (no network, same routes). Exit codes: 0 success, 1 usage
error, 2 data/format error, 3 failed verification.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys

import httpx

from . import __version__
from . import config as cfg_mod
from .errors import ConfigError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class _UsageAbort(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageAbort(message)


# ---------------------------------------------------------------------------
# Transport
# ---------------------------------------------------------------------------

_APP = None


def _in_process_app():
    global _APP
    if _APP is None:
        from .service import create_app
        _APP = create_app()
    return _APP


def _request(server: str | None, method: str, path: str, payload: dict | None):
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            response = client.request(method, path, json=payload)
            return response.status_code, response.json()

    async def go():
        transport = httpx.ASGITransport(app=_in_process_app())
        async with httpx.AsyncClient(transport=transport, base_url="http://mopq.local",
                                     timeout=None) as client:
            response = await client.request(method, path, json=payload)
            return response.status_code, response.json()

    return asyncio.run(go())


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------

def _emit_json(body: dict) -> None:
    print(json.dumps(body, sort_keys=True, separators=(",", ":")))


def _table(headers: list[str], rows: list[list]) -> None:
    cells = [headers] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    for r, row in enumerate(cells):
        print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if r == 0:
            print("  ".join("-" * widths[i] for i in range(len(headers))))


def _kv(pairs: list[tuple[str, object]]) -> None:
    width = max(len(k) for k, _ in pairs)
    for key, value in pairs:
        print(f"{key.ljust(width)}  {value}")


# ---------------------------------------------------------------------------
# Command handlers: build payload, call endpoint, render response
# ---------------------------------------------------------------------------

def _load_config(args) -> dict:
    if getattr(args, "config", None):
        return cfg_mod.load_config(args.config)
    return cfg_mod.default_config()


def _cmd_gen_data(args) -> tuple[str, dict]:
    config = _load_config(args)
    payload = {
        "out_dir": args.out,
        "pairs": args.pairs if args.pairs is not None else config["pairs"],
        "input_dim": args.input_dim if args.input_dim is not None else (config["input_dim"] or 64),
        "clusters": args.clusters if args.clusters is not None else config["clusters"],
        "noise_sigma": args.noise_sigma if args.noise_sigma is not None else config["noise_sigma"],
        "noise_anisotropy": args.noise_anisotropy,
        "seed": args.seed if args.seed is not None else config["seed"],
    }
    return "/data/generate", payload


def _render_gen_data(body: dict) -> None:
    _kv([("dataset", body["out_dir"]), ("pairs", body["pairs"]),
         ("input_dim", body["input_dim"])]
        + [(f"{name} pairs", size) for name, size in sorted(body["split_sizes"].items())])


def _cmd_train(args) -> tuple[str, dict]:
    config = _load_config(args)
    overrides = {key: getattr(args, key.replace("-", "_"), None)
                 for key in ("objective", "epochs", "batch_size", "devices",
                             "learning_rate", "seed", "recon_weight",
                             "codebooks", "codewords", "selection",
                             "hidden_dim", "output_dim", "depth")}
    config = cfg_mod.apply_overrides(config, overrides)
    data_dir = args.data or config["data_dir"]
    out_path = args.out or config["checkpoint"]
    if not data_dir:
        raise _UsageAbort("train needs --data or a data_dir config entry")
    if not out_path:
        raise _UsageAbort("train needs --out or a checkpoint config entry")
    payload = {
        "data_dir": data_dir, "out_path": out_path,
        "objective": config["objective"], "recon_weight": config["recon_weight"],
        "epochs": config["epochs"], "batch_size": config["batch_size"],
        "devices": config["devices"], "learning_rate": config["learning_rate"],
        "adam_beta1": config["adam_beta1"], "adam_beta2": config["adam_beta2"],
        "seed": config["seed"], "commitment_grad": config["commitment_grad"],
        "hidden_dim": config["hidden_dim"], "output_dim": config["output_dim"],
        "depth": config["depth"], "codebooks": config["codebooks"],
        "codewords": config["codewords"], "selection": config["selection"],
    }
    return "/train", payload


def _render_train(body: dict) -> None:
    _kv([("checkpoint", body["checkpoint"]), ("best_epoch", body["best_epoch"])])
    rows = [[e, f"{body['loss'][e]:.6f}", f"{body['reconstruction_loss'][e]:.4f}",
             f"{body['recall_at_1'][e]:.4f}", f"{body['recall_at_10'][e]:.4f}"]
            for e in range(len(body["loss"]))]
    _table(["epoch", "loss", "recon_loss", "recall@1", "recall@10"], rows)


def _cmd_index(args) -> tuple[str, dict]:
    return "/index", {"checkpoint": args.checkpoint, "keys_path": args.keys,
                      "out_path": args.out}


def _render_index(body: dict) -> None:
    _kv([("index", body["index"]), ("keys", body["key_count"]),
         ("codebooks", body["codebooks"]), ("codewords", body["codewords"]),
         ("dim", body["dim"])])


def _cmd_search(args) -> tuple[str, dict]:
    payload = {"index_path": args.index, "checkpoint": args.checkpoint,
               "topn": args.topn}
    if args.queries:
        payload["queries_path"] = args.queries
    if args.query_id:
        payload["query_ids"] = args.query_id
    if args.text is not None:
        payload["text"] = args.text
    return "/search", payload


def _render_search(body: dict) -> None:
    for qid in body["results"]:
        print(f"query {qid}:")
        rows = [[i + 1, hit["key_id"], f"{hit['score']:.6f}"]
                for i, hit in enumerate(body["results"][qid])]
        _table(["rank", "key", "score"], rows)


def _cmd_eval(args) -> tuple[str, dict]:
    config = _load_config(args)
    topn = [int(t) for t in (args.topn or config["topn"]).split(",")]
    return "/eval", {"checkpoint": args.checkpoint, "data_dir": args.data,
                     "split": args.split, "topn": topn,
                     "pool": args.pool or config["pool"]}


def _render_eval(body: dict) -> None:
    _kv([("split", body["split"]), ("pool", body["pool"]),
         ("queries", body["query_count"])])
    rows = [[f"recall@{n}", f"{v:.4f}"] for n, v in sorted(
        ((int(k), v) for k, v in body["recall_at"].items()))]
    _table(["metric", "value"], rows)


def _cmd_verify(args) -> tuple[str, dict]:
    if args.check == "lemma":
        return "/verify/lemma", {
            "trials": args.trials, "seed": args.seed, "dim": args.dim,
            "codebooks": args.codebooks, "codewords": args.codewords,
            "keys": args.keys, "queries": args.queries}
    if args.check == "positive-recon":
        return "/verify/positive-recon", {
            "seed": args.seed, "keys": args.keys, "dim": args.dim,
            "codebooks": args.codebooks,
            "l_sequence": [int(x) for x in args.l_sequence.split(",")]}
    if args.check == "dcs-equivalence":
        return "/verify/dcs-equivalence", {
            "devices": args.devices, "batch": args.batch, "seed": args.seed,
            "check_differences": not args.skip_differences}
    return "/verify/nonmonotone-sweep", _sweep_payload(args)


def _sweep_payload(args) -> dict:
    payload = {
        "seeds": [int(s) for s in args.seeds.split(",")],
        "weights": [float(w) for w in args.weights.split(",")],
        "pool": args.pool,
        "include_mopq": True,
    }
    if args.data:
        payload["data_dir"] = args.data
    if args.epochs is not None:
        payload["epochs"] = args.epochs
    return payload


def _render_verify(check: str, body: dict) -> None:
    status = "PASS" if body.get("passed") else "FAIL"
    if check == "lemma":
        _kv([("check", "assignment-invariant perturbation"),
             ("trials", body["trials"]), ("trials_passed", body["trials_passed"]),
             ("result", status)])
    elif check == "positive-recon":
        _kv([("check", "positive reconstruction loss"),
             ("final_loss", body["final_loss"]),
             ("appended_codewords", body["append_count"]), ("result", status)]
            + [(f"kmeans_loss[L={k}]", f"{v:.6f}")
               for k, v in sorted(body["kmeans_losses"].items(), key=lambda p: int(p[0]))])
    elif check == "dcs-equivalence":
        _kv([("check", "cross-device gradient equivalence"),
             ("max_rel_error", f"{body['max_rel_error']:.3e}"),
             ("max_fd_error", f"{body['max_fd_error']:.3e}"),
             ("max_ncs_gap", f"{body['max_ncs_gap']:.3e}"), ("result", status)])
        rows = [[r["devices"], r["batch_size"], f"{r['dcs_vs_oracle']:.3e}",
                 f"{r['ncs_vs_oracle']:.3e}", f"{r['dcs_vs_differences']:.3e}"]
                for r in body["rows"]]
        _table(["devices", "batch", "dcs_vs_oracle", "ncs_vs_oracle", "dcs_vs_fd"], rows)
    else:
        _kv([("check", "non-monotone sweep"),
             ("seeds_passing", body["seeds_passing"]),
             ("seeds_total", body["seeds_total"]), ("result", status)])
        _render_sweep_rows(body["rows"])


def _render_sweep_rows(rows: list[dict]) -> None:
    _table(["recon_weight", "seed", "recall@10", "final_recon_loss"],
           [[r["recon_weight"], r["seed"], f"{r['recall_at_10']:.4f}",
             f"{r['final_reconstruction_loss']:.2f}"] for r in rows])


def _render_sweep(body: dict) -> None:
    _render_sweep_rows(body["rows"])
    if body["mopq_recall_by_seed"]:
        _kv([("contrastive mean recall@10", f"{body['mopq_mean']:.4f}"),
             ("best baseline mean recall@10", f"{body['best_dqn_mean']:.4f}")])


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="mopq", description=__doc__)
    parser.add_argument("--server", help="base URL of a running service; "
                                         "defaults to the in-process app")
    parser.add_argument("--json", action="store_true",
                        help="print raw response JSON, one object per line")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP service")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)

    gen = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    gen.add_argument("--config")
    gen.add_argument("--out", required=True)
    gen.add_argument("--pairs", type=int)
    gen.add_argument("--input-dim", type=int)
    gen.add_argument("--clusters", type=int)
    gen.add_argument("--noise-sigma", type=float)
    gen.add_argument("--noise-anisotropy", type=float, default=1.0)
    gen.add_argument("--seed", type=int)

    train = sub.add_parser("train", help="train a model")
    train.add_argument("--config")
    train.add_argument("--data")
    train.add_argument("--out")
    train.add_argument("--objective",
                       choices=["mopq-inbatch", "mopq-dcs", "mopq-ncs", "dqn"])
    train.add_argument("--epochs", type=int)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--devices", type=int)
    train.add_argument("--learning-rate", type=float)
    train.add_argument("--seed", type=int)
    train.add_argument("--recon-weight", type=float)
    train.add_argument("--codebooks", type=int)
    train.add_argument("--codewords", type=int)
    train.add_argument("--selection", choices=["l2", "cosine", "product", "bilinear"])
    train.add_argument("--hidden-dim", type=int)
    train.add_argument("--output-dim", type=int)
    train.add_argument("--depth", type=int)

    index = sub.add_parser("index", help="build a quantized index file")
    index.add_argument("--checkpoint", required=True)
    index.add_argument("--keys", required=True, help="embedding file of raw key vectors")
    index.add_argument("--out", required=True)

    search = sub.add_parser("search", help="ADC top-N search against an index")
    search.add_argument("--index", required=True)
    search.add_argument("--checkpoint", required=True)
    search.add_argument("--queries", help="embedding file of raw query vectors")
    search.add_argument("--query-id", action="append",
                        help="restrict to one query id (repeatable)")
    search.add_argument("--text", help="hash-featurized inline text query")
    search.add_argument("--topn", type=int, default=10)

    ev = sub.add_parser("eval", help="recall evaluation on a dataset split")
    ev.add_argument("--config")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--split", default="test", choices=["train", "valid", "test"])
    ev.add_argument("--topn")
    ev.add_argument("--pool", choices=["split", "all"])

    verify = sub.add_parser("verify", help="run a verification suite")
    vsub = verify.add_subparsers(dest="check", required=True)
    lemma = vsub.add_parser("lemma", help="assignment-invariant perturbation checks")
    lemma.add_argument("--trials", type=int, default=100)
    lemma.add_argument("--seed", type=int, default=0)
    lemma.add_argument("--dim", type=int, default=8)
    lemma.add_argument("--codebooks", type=int, default=2)
    lemma.add_argument("--codewords", type=int, default=4)
    lemma.add_argument("--keys", type=int, default=50)
    lemma.add_argument("--queries", type=int, default=20)
    precon = vsub.add_parser("positive-recon", help="undersized codebooks leave loss")
    precon.add_argument("--seed", type=int, default=0)
    precon.add_argument("--keys", type=int, default=3)
    precon.add_argument("--dim", type=int, default=4)
    precon.add_argument("--codebooks", type=int, default=1)
    precon.add_argument("--l-sequence", default="1")
    dcs_eq = vsub.add_parser("dcs-equivalence", help="per-device vs pooled gradients")
    dcs_eq.add_argument("--devices", type=int, default=4)
    dcs_eq.add_argument("--batch", type=int, default=4)
    dcs_eq.add_argument("--seed", type=int, default=0)
    dcs_eq.add_argument("--skip-differences", action="store_true")
    nonmono = vsub.add_parser("nonmonotone-sweep",
                              help="reconstruction weight vs recall trend")
    _add_sweep_args(nonmono)

    sweep = sub.add_parser("sweep-lambda", help="reconstruction-weight study")
    _add_sweep_args(sweep)
    return parser


def _add_sweep_args(parser) -> None:
    parser.add_argument("--data", help="dataset dir; defaults to the pinned benchmark")
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--weights", default="1.0,0.1,0.01,0.001")
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--pool", default="all", choices=["split", "all"])


_COMMANDS = {
    "gen-data": (_cmd_gen_data, _render_gen_data),
    "train": (_cmd_train, _render_train),
    "index": (_cmd_index, _render_index),
    "search": (_cmd_search, _render_search),
    "eval": (_cmd_eval, _render_eval),
    "sweep-lambda": (lambda a: ("/sweep-lambda", _sweep_payload(a)), _render_sweep),
}


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE

    if args.command == "serve":
        import uvicorn

        from .service import create_app
        uvicorn.run(create_app(), host=args.host, port=args.port)
        return EXIT_OK

    try:
        if args.command == "verify":
            path, payload = _cmd_verify(args)
        else:
            builder, _ = _COMMANDS[args.command]
            path, payload = builder(args)
    except (_UsageAbort, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    try:
        status, body = _request(args.server, "POST", path, payload)
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service: {exc}", file=sys.stderr)
        return EXIT_DATA

    if status == 422:
        print(f"error: invalid request: {json.dumps(body)}", file=sys.stderr)
        return EXIT_USAGE
    if status != 200:
        kind = body.get("kind", "data") if isinstance(body, dict) else "data"
        message = body.get("message", body) if isinstance(body, dict) else body
        print(f"error ({kind}): {message}", file=sys.stderr)
        return EXIT_USAGE if kind == "usage" else EXIT_DATA

    if args.json:
        _emit_json(body)
    elif args.command == "verify":
        _render_verify(args.check, body)
    else:
        _COMMANDS[args.command][1](body)

    if args.command == "verify" and not body.get("passed", False):
        return EXIT_VERIFY
    return EXIT_OK


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
