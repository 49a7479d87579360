"""Command-line client for the verification service.

Every subcommand is a thin HTTP client: by default it mounts the service
in-process (no socket, same wire format), and ``--url`` points it at a
running remote instance instead. Exit codes: 0 success, 1 verification
failure, 2 usage error.
"""

from __future__ import annotations

import asyncio
import base64
import json
import sys
from dataclasses import dataclass

import click
import httpx


@dataclass
class RunConfig:
    """Connection settings shared by all subcommands."""

    url: str | None = None
    timeout: float = 600.0


def _request(run: RunConfig, method: str, path: str, payload=None):
    async def go():
        if run.url:
            client = httpx.AsyncClient(base_url=run.url, timeout=run.timeout)
        else:
            from .service import create_app
            client = httpx.AsyncClient(
                transport=httpx.ASGITransport(app=create_app()),
                base_url="http://dgattn.internal", timeout=run.timeout)
        async with client:
            resp = await client.request(method, path, json=payload)
            body = resp.json() if resp.content else {}
            return resp.status_code, body

    try:
        status, body = asyncio.run(go())
    except httpx.HTTPError as exc:
        click.echo(f"service unreachable: {exc}", err=True)
        sys.exit(1)
    if status in (400, 422, 501):
        click.echo(f"request rejected ({status}): {_detail(body)}", err=True)
        sys.exit(2)
    if status != 200:
        click.echo(f"service error ({status}): {_detail(body)}", err=True)
        sys.exit(1)
    return body


def _detail(body) -> str:
    if isinstance(body, dict) and "detail" in body:
        return json.dumps(body["detail"]) if isinstance(body["detail"], list) \
            else str(body["detail"])
    return json.dumps(body)


@click.group()
@click.option("--url", default=None, metavar="URL",
              help="Base URL of a running service; default runs in-process.")
@click.pass_context
def main(ctx, url):
    """Grouped-attention verification toolkit."""
    ctx.obj = RunConfig(url=url)


@main.command()
@click.option("--seed", default=0, show_default=True)
@click.option("--sabotage", default=None, metavar="FORM",
              help="Corrupt one engine form to prove the suites catch it.")
@click.pass_obj
def check(run, seed, sabotage):
    """Run the oracle-equivalence suites."""
    body = _request(run, "POST", "/check",
                    {"seed": seed, "sabotage": sabotage})
    for suite in body["suites"]:
        status = "pass" if suite["passed"] else "FAIL"
        extra = f"  {suite['detail']}" if suite["detail"] else ""
        click.echo(f"{status}  {suite['name']}  "
                   f"max_error={suite['max_error']:.3e}{extra}")
    if not body["passed"]:
        click.echo("verification FAILED", err=True)
        sys.exit(1)
    click.echo("all suites passed")


@main.command()
@click.option("-l", "--tokens", default=10, show_default=True)
@click.option("-c", "--head-dim", default=4, show_default=True)
@click.option("-g", "--groups", default=2, show_default=True)
@click.option("-k", "--top-k", default=5, show_default=True)
@click.option("-h", "--heads", default=1, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.pass_obj
def gradcheck(run, tokens, head_dim, groups, top_k, heads, seed):
    """Finite-difference check of the hand-written backward pass."""
    body = _request(run, "POST", "/gradcheck", {
        "tokens": tokens, "head_dim": head_dim, "groups": groups,
        "top_k": top_k, "heads": heads, "seed": seed})
    click.echo(f"instance: tokens={body['tokens']} head_dim={body['head_dim']} "
               f"groups={body['groups']} top_k={body['top_k']} "
               f"heads={body['heads']} seed={body['seed_used']} "
               f"(attempt {body['attempts']})")
    click.echo(f"routing margin: {body['margin']:.3e}")
    for name in ("q", "k", "v"):
        click.echo(f"max relative error d{name}: {body[f'max_rel_{name}']:.3e}")
    if not body["passed"]:
        click.echo("gradient check FAILED", err=True)
        sys.exit(1)
    click.echo("gradient check passed")


@main.command()
@click.option("--variant", default=None, metavar="NAME",
              help="Named variant; reports every stage plus params and flops.")
@click.option("-l", "--tokens", default=None, type=int)
@click.option("-c", "--channels", default=None, type=int)
@click.option("-g", "--groups", default=None, type=int)
@click.option("-k", "--top-k", default=None, type=int)
@click.option("--size", default=224, show_default=True,
              help="Input resolution for variant mode.")
@click.option("--json", "as_json", is_flag=True, help="Emit raw JSON.")
@click.pass_obj
def complexity(run, variant, tokens, channels, groups, top_k, size, as_json):
    """Operation counts: grouped attention versus dense attention."""
    if variant is not None:
        body = _request(run, "POST", "/complexity/variant",
                        {"variant": variant, "size": size})
        if as_json:
            click.echo(json.dumps(body, indent=1))
            return
        click.echo(f"{body['variant']} @ {body['size']}px   "
                   f"params={body['params']:,}   flops={body['flops']:,}")
        header = (f"{'stage':>5} {'tokens':>7} {'chan':>5} {'groups':>6} "
                  f"{'top_k':>5} {'omega_dg':>12} {'omega_global':>13} "
                  f"{'ratio':>6}")
        click.echo(header)
        for row in body["stages"]:
            g = row["groups"] if row["groups"] is not None else "-"
            k = row["top_k"] if row["top_k"] is not None else "-"
            click.echo(f"{row['stage']:>5} {row['tokens']:>7} "
                       f"{row['channels']:>5} {g:>6} {k:>5} "
                       f"{row['omega_dg']:>12.4g} "
                       f"{row['omega_global']:>13.4g} {row['ratio']:>6.2f}")
        return
    if None in (tokens, channels, groups, top_k):
        raise click.UsageError(
            "provide --variant or all of --tokens, --channels, --groups, "
            "--top-k")
    body = _request(run, "POST", "/complexity", {
        "tokens": tokens, "channels": channels, "groups": groups,
        "top_k": top_k})
    if as_json:
        click.echo(json.dumps(body, indent=1))
        return
    click.echo(f"omega_global  = {body['omega_global']:.6g}")
    click.echo(f"omega_dg      = {body['omega_dg']:.6g}")
    click.echo(f"  attention   = {body['term_attention']:.6g}")
    click.echo(f"  routing     = {body['term_routing']:.6g}")
    click.echo(f"  sort        = {body['term_sort']:.6g}")
    click.echo(f"ratio         = {body['ratio']:.4f}")


@main.command()
@click.option("--grid", default=16, show_default=True)
@click.option("--channels", default=8, show_default=True)
@click.option("-g", "--groups", default=2, show_default=True)
@click.option("-k", "--top-k", default=8, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--iters", default=10, show_default=True,
              help="Centroid bootstrap iterations.")
@click.option("--input", "input_path", default=None, metavar="PATH",
              help="JSON tensor (height x width x channels) instead of the "
                   "synthetic grid.")
@click.option("--out", "out_prefix", default="viz", show_default=True,
              metavar="PREFIX", help="Output prefix for .pgm and .json files.")
@click.pass_obj
def viz(run, grid, channels, groups, top_k, seed, iters, input_path,
        out_prefix):
    """Render the group-assignment map of one routing pass."""
    payload = {"grid": grid, "channels": channels, "groups": groups,
               "top_k": top_k, "seed": seed, "bootstrap_iters": iters}
    if input_path:
        try:
            with open(input_path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            click.echo(f"cannot read {input_path}: {exc}", err=True)
            sys.exit(2)
        payload["tokens"] = raw
    body = _request(run, "POST", "/viz", payload)
    pgm_path = f"{out_prefix}.pgm"
    sel_path = f"{out_prefix}_selection.json"
    with open(pgm_path, "wb") as fh:
        fh.write(base64.b64decode(body["pgm_base64"]))
    with open(sel_path, "w") as fh:
        json.dump(body["selection"], fh, indent=1)
    click.echo(f"wrote {pgm_path} ({body['width']}x{body['height']}, "
               f"{body['groups']} groups) and {sel_path}")


@main.command("toy-train")
@click.option("--steps", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--lr", default=0.1, show_default=True)
@click.option("--out", "out_path", default="toy_loss.csv", show_default=True,
              metavar="PATH")
@click.pass_obj
def toy_train_cmd(run, steps, seed, lr, out_path):
    """Train the two-block toy network on synthetic two-class data."""
    body = _request(run, "POST", "/toy-train",
                    {"steps": steps, "seed": seed, "lr": lr})
    with open(out_path, "w") as fh:
        fh.write(body["csv"])
    click.echo(f"steps={steps} initial_loss={body['initial_loss']:.6f} "
               f"final_loss={body['final_loss']:.6f}")
    click.echo(f"wrote {out_path}")


@main.command()
@click.option("-l", "--tokens", default=256, show_default=True)
@click.option("-c", "--channels", default=32, show_default=True)
@click.option("-g", "--groups", default=8, show_default=True)
@click.option("-k", "--top-k", default=64, show_default=True)
@click.option("--tiles", default="16", show_default=True,
              help="Comma-separated tile sizes.")
@click.option("--mode", default="split", show_default=True,
              type=click.Choice(["split", "aligned"]))
@click.option("--format", "fmt", default="json", show_default=True,
              type=click.Choice(["json", "csv"]))
@click.option("--out", "out_path", default=None, metavar="PATH")
@click.option("--seed", default=0, show_default=True)
@click.pass_obj
def bench(run, tokens, channels, groups, top_k, tiles, mode, fmt, out_path,
          seed):
    """Time the engine forms and report tile/mask/gather counters."""
    try:
        tile_list = [int(t) for t in tiles.split(",") if t.strip()]
    except ValueError:
        raise click.UsageError(f"bad --tiles value {tiles!r}")
    if not tile_list:
        raise click.UsageError("need at least one tile size")
    body = _request(run, "POST", "/bench", {
        "tokens": tokens, "channels": channels, "groups": groups,
        "top_k": top_k, "tiles": tile_list, "mode": mode, "seed": seed})
    text = body["csv"] if fmt == "csv" else json.dumps(body["rows"], indent=1)
    if out_path:
        with open(out_path, "w") as fh:
            fh.write(text)
        click.echo(f"wrote {out_path}")
    else:
        click.echo(text)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app
    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
