"""Command-line client for the pipeline service.

Each subcommand builds the same request model the HTTP API accepts and
dispatches it either in-process (default) or to a running service via
``--server URL``, so behaviour is identical either way. Config values can
also be overridden through ``VASCMAE_*`` environment variables
(e.g. ``VASCMAE_PRETRAIN__EPOCHS=2``).
"""

from __future__ import annotations

import json
import sys

import click

from .pipeline import PipelineError
from .service import schemas
from .service.app import (
    handle_ablate,
    handle_eval,
    handle_finetune,
    handle_infer,
    handle_pretrain,
    handle_synth,
)

_HANDLERS = {
    "synth": (schemas.SynthRequest, handle_synth),
    "pretrain": (schemas.PretrainRequest, handle_pretrain),
    "finetune": (schemas.FinetuneRequest, handle_finetune),
    "infer": (schemas.InferRequest, handle_infer),
    "eval": (schemas.EvalRequest, handle_eval),
    "ablate": (schemas.AblateRequest, handle_ablate),
}


def _dispatch(stage: str, server: str | None, **params):
    request_model, handler = _HANDLERS[stage]
    request = request_model(**params)
    if server is None:
        try:
            response = handler(request)
        except (PipelineError, ValueError, OSError) as exc:
            raise click.ClickException(str(exc)) from exc
        payload = response.model_dump()
    else:
        import httpx

        url = server.rstrip("/") + "/" + stage
        reply = httpx.post(url, json=request.model_dump(), timeout=None)
        if reply.status_code != 200:
            raise click.ClickException(f"{url} returned {reply.status_code}: {reply.text}")
        payload = reply.json()
    click.echo(json.dumps(payload, indent=2, sort_keys=True))
    return payload


def common_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(), default=None,
                      help="Experiment config JSON; defaults apply when omitted.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Override the config seed.")(fn)
    fn = click.option("--workers", type=int, default=1, show_default=True,
                      help="Parallel workers for case-level stages.")(fn)
    fn = click.option("--force", is_flag=True, help="Overwrite existing outputs.")(fn)
    fn = click.option("--server", default=None, metavar="URL",
                      help="Send the request to a running service instead of executing in-process.")(fn)
    return fn


@click.group()
def main():
    """Synthetic-phantom lesion detection pipeline."""


@main.command()
@common_options
@click.option("--n-cases", type=int, required=True)
@click.option("--out-dir", type=click.Path(), required=True)
def synth(config_path, seed, workers, force, server, n_cases, out_dir):
    """Generate phantom cases, distance maps, and a dataset manifest."""
    _dispatch("synth", server, config_path=config_path, seed=seed, workers=workers,
              force=force, n_cases=n_cases, out_dir=out_dir)


@main.command()
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--out-dir", type=click.Path(), required=True)
def pretrain(config_path, seed, workers, force, server, manifest_path, out_dir):
    """Masked-reconstruction pre-training; writes checkpoint + loss log."""
    _dispatch("pretrain", server, config_path=config_path, seed=seed, workers=workers,
              force=force, manifest_path=manifest_path, out_dir=out_dir)


@main.command()
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None,
              help="Pre-train checkpoint to start from.")
@click.option("--from-scratch", is_flag=True, help="Train without pre-trained weights.")
@click.option("--out-dir", type=click.Path(), required=True)
def finetune(config_path, seed, workers, force, server, manifest_path, checkpoint_path,
             from_scratch, out_dir):
    """Detection fine-tuning from a checkpoint or from scratch."""
    _dispatch("finetune", server, config_path=config_path, seed=seed, workers=workers,
              force=force, manifest_path=manifest_path, checkpoint_path=checkpoint_path,
              from_scratch=from_scratch, out_dir=out_dir)


@main.command()
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--model", "model_path", type=click.Path(), required=True)
@click.option("--out-dir", type=click.Path(), required=True)
def infer(config_path, seed, workers, force, server, manifest_path, model_path, out_dir):
    """Sliding-window inference; writes one predictions entry per case."""
    _dispatch("infer", server, config_path=config_path, seed=seed, workers=workers,
              force=force, manifest_path=manifest_path, model_path=model_path, out_dir=out_dir)


@main.command("eval")
@common_options
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--pred", "preds", multiple=True, required=True, metavar="[LABEL=]PATH",
              help="Predictions file; repeat to compare sets.")
@click.option("--out-dir", type=click.Path(), required=True)
def eval_cmd(config_path, seed, workers, force, server, manifest_path, preds, out_dir):
    """FROC, Se@FPr, patient metrics, size strata, and permutation tests."""
    sets = []
    for i, spec in enumerate(preds):
        label, _, path = spec.rpartition("=")
        sets.append({"label": label or f"set{i}", "path": path})
    _dispatch("eval", server, config_path=config_path, seed=seed, workers=workers,
              force=force, manifest_path=manifest_path, predictions=sets, out_dir=out_dir)


@main.command()
@common_options
@click.option("--train-manifest", type=click.Path(), required=True)
@click.option("--eval-manifest", type=click.Path(), required=True)
@click.option("--reduced", is_flag=True,
              help="Insufficient-compute mode: run a reduced variant set.")
@click.option("--out-dir", type=click.Path(), required=True)
def ablate(config_path, seed, workers, force, server, train_manifest, eval_manifest,
           reduced, out_dir):
    """Train and compare the design-choice variants (A, D, E, F, G)."""
    _dispatch("ablate", server, config_path=config_path, seed=seed, workers=workers,
              force=force, train_manifest=train_manifest, eval_manifest=eval_manifest,
              reduced=reduced, out_dir=out_dir)


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8000, show_default=True)
def serve(host, port):
    """Run the HTTP service."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    sys.exit(main())
