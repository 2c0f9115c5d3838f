"""`ictx-adapter` entry point: serve a real model or the protocol mock.

Flags override environment: ICTX_ADAPTER_MODEL, ICTX_ADAPTER_PORT,
ICTX_IMAGE_ROOT.
"""

from __future__ import annotations

import click

from .server import AdapterConfig, serve, serve_mock


def _config(model, port, image_root) -> AdapterConfig:
    return AdapterConfig(model=model, port=port, image_root=image_root)


def common_options(fn):
    fn = click.option("--model", envvar="ICTX_ADAPTER_MODEL",
                      default="mock/echo-last", show_default=True)(fn)
    fn = click.option("--port", envvar="ICTX_ADAPTER_PORT", type=int,
                      default=8080, show_default=True)(fn)
    fn = click.option("--image-root", envvar="ICTX_IMAGE_ROOT", default=None,
                      help="Directory resolving id-mode image refs.")(fn)
    fn = click.option("--host", default="127.0.0.1", show_default=True)(fn)
    return fn


@click.group()
@click.version_option()
def main():
    """Captioning server speaking the ictx generation wire protocol."""


@main.command("serve")
@common_options
def cmd_serve(model, port, image_root, host):
    """Serve a real captioning model."""
    import uvicorn
    app = serve(_config(model, port, image_root))
    uvicorn.run(app, host=host, port=port)


@main.command("serve-mock")
@common_options
def cmd_serve_mock(model, port, image_root, host):
    """Serve the deterministic echo-last mock (no GPU needed)."""
    import uvicorn
    app = serve_mock(_config(model, port, image_root))
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
