"""Command-line front end.

The CLI is a thin client of the HTTP service: every subcommand builds a
request from the YAML config and posts it to the FastAPI app, by default
through an in-process ASGI transport (no server needed, artifacts land on
the local filesystem), or to a remote server with --server. Exit codes:
0 success, 2 config/validation, 3 capacity, 4 numerical degeneracy,
1 anything else.
"""

from __future__ import annotations

import argparse
import asyncio
import sys
from pathlib import Path

import httpx
import yaml

from . import __version__

EXIT_CODES = {"validation": 2, "capacity": 3, "degeneracy": 4, "error": 1}

_STAGE_ROUTES = {
    "phantom": "/run/phantom",
    "simulate": "/run/simulate",
    "recon-xlct": "/run/recon-xlct",
    "recon-ct": "/run/recon-ct",
    "metrics": "/run/metrics",
    "pipeline": "/run/pipeline",
}


def _call(server: str | None, path: str, payload: dict) -> tuple[int, dict]:
    if server:
        with httpx.Client(base_url=server, timeout=None) as client:
            resp = client.post(path, json=payload)
            return resp.status_code, resp.json()

    from .service.app import app

    async def go():
        transport = httpx.ASGITransport(app=app)
        async with httpx.AsyncClient(transport=transport,
                                     base_url="http://xlctsim.internal",
                                     timeout=None) as client:
            return await client.post(path, json=payload)

    resp = asyncio.run(go())
    return resp.status_code, resp.json()


def _load_raw_config(path: str) -> dict:
    """Parse the YAML client-side so syntax errors carry line/column."""
    p = Path(path)
    if not p.exists():
        raise SystemExit(_fail("validation", f"config file not found: {p}"))
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise SystemExit(_fail("validation", f"cannot parse {p}{where}: {exc}"))
    if not isinstance(raw, dict):
        raise SystemExit(_fail("validation", "config root must be a mapping"))
    return raw


def _fail(kind: str, message: str) -> int:
    print(f"error ({kind}): {message}", file=sys.stderr)
    return EXIT_CODES.get(kind, 1)


def _handle_error(status: int, body: dict) -> int:
    detail = body.get("detail", body)
    if isinstance(detail, dict) and "kind" in detail:
        return _fail(detail["kind"], detail.get("message", ""))
    # FastAPI request-validation errors arrive as a list of loc/msg entries
    if isinstance(detail, list):
        msgs = "; ".join(
            ".".join(str(x) for x in e.get("loc", [])) + ": " + e.get("msg", "")
            for e in detail)
        return _fail("validation", msgs)
    return _fail("error", f"HTTP {status}: {detail}")


def _print_artifacts(body: dict) -> None:
    for art in body.get("artifacts", []):
        print(f"wrote {art['path']} ({art['bytes']} bytes, "
              f"sha256 {art['sha256'][:12]}...)")


def _run_stage(args, route: str) -> int:
    payload = {
        "config": _load_raw_config(args.config),
        "out_dir": args.out,
        "seed": args.seed,
        "threads": args.threads,
    }
    if route == "/run/sweep":
        payload["concentrations"] = args.concentrations
        payload["cnr_threshold"] = args.cnr_threshold
    status, body = _call(args.server, route, payload)
    if status >= 400:
        return _handle_error(status, body)

    if route == "/run/pipeline":
        manifest = body["manifest"]
        print(f"pipeline {manifest['status']} -> {body['out_dir']}")
        for stage in manifest["stages"]:
            print(f"  {stage['name']}: {stage['seconds']:.3f} s")
        print(f"  artifacts: {len(manifest['artifacts'])} "
              f"(see {body['out_dir']}/manifest.yaml)")
    elif route == "/run/sweep":
        print("concentration_uM,cnr")
        for c, value in body["rows"]:
            print(f"{c:g},{value:g}")
        print(f"cnr_threshold={body['cnr_threshold']:g}")
        print("first_concentration_below_threshold="
              f"{body['first_concentration_below_threshold']}")
    else:
        print(f"{body['stage']} done in {body['elapsed_s']:.3f} s "
              f"-> {body['out_dir']}")
        for key, value in body.get("summary", {}).items():
            print(f"  {key}={value}")
        _print_artifacts(body)
    return 0


def _serve(args) -> int:
    import uvicorn

    from .service.app import app
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


def _add_common(parser: argparse.ArgumentParser, config_required=True) -> None:
    parser.add_argument("--config", required=config_required,
                        help="YAML pipeline configuration")
    parser.add_argument("--out", default=None,
                        help="output directory (overrides config output_dir)")
    parser.add_argument("--seed", type=int, default=None,
                        help="RNG seed (overrides config seed)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker thread hint (never changes results)")
    parser.add_argument("--server", default=None,
                        help="remote service URL; default runs in-process")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xlctsim",
        description="Virtual focused-beam XLCT scanner: simulate fly-scan "
                    "acquisitions and reconstruct concentration/attenuation "
                    "volumes.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    helps = {
        "phantom": "build the phantom and write the truth volume",
        "simulate": "synthesize XLCT counts and the CT sinogram",
        "recon-xlct": "reconstruct concentration from stored counts",
        "recon-ct": "reconstruct attenuation from the stored sinogram",
        "metrics": "compute quality metrics from stored volumes",
        "pipeline": "run every stage and write the manifest",
    }
    for name, route in _STAGE_ROUTES.items():
        p = sub.add_parser(name, help=helps[name])
        _add_common(p)
        p.set_defaults(route=route)

    p = sub.add_parser("sweep",
                       help="run the pipeline over a list of target "
                            "concentrations and report CNR sensitivity")
    _add_common(p)
    p.add_argument("--concentrations", required=True,
                   type=lambda s: [float(v) for v in s.split(",")],
                   help="comma-separated concentrations in uM, e.g. 1,0.5,0.25")
    p.add_argument("--cnr-threshold", type=float, default=4.0)
    p.set_defaults(route="/run/sweep")

    p = sub.add_parser("serve", help="start the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        return _serve(args)
    try:
        return _run_stage(args, args.route)
    except SystemExit:
        raise
    except httpx.HTTPError as exc:
        return _fail("error", f"cannot reach service: {exc}")


if __name__ == "__main__":
    sys.exit(main())
