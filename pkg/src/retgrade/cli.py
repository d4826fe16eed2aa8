"""Operator command line: degrade, build-dataset, train, eval, attribute, serve.

Structured results go to stdout as JSON lines; human diagnostics go to
stderr. Exit codes: 0 success, 1 usage/config error, 2 data error,
3 internal error. Every failure prints one machine-parseable JSON line on
stderr: {"error": {"code": ..., "message": ...}}.
"""

from __future__ import annotations

import json
import socket
import sys
from pathlib import Path

import click

from . import attribution as attr_mod
from . import metrics as metrics_mod
from . import model as model_mod
from .fundus import (
    DataError,
    DatasetManifest,
    ManifestEntry,
    build_balanced,
    expand_degraded,
    load_image,
    save_png,
)

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload) + "\n")
    sys.stdout.flush()


def _fail_line(code: str, message: str) -> None:
    sys.stderr.write(json.dumps({"error": {"code": code, "message": message}}) + "\n")
    sys.stderr.flush()


class InternalError(RuntimeError):
    pass


@click.group()
def cli():
    """Diabetic-retinopathy grading toolkit."""


@cli.command()
@click.option("--in", "manifest_path", required=True, type=click.Path(),
              help="Input manifest CSV; image paths resolve relative to it.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, type=int, show_default=True)
def degrade(manifest_path, out_dir, seed):
    """Expand every image into its 8 degradation-combination variants."""
    manifest = DatasetManifest.load(manifest_path)
    if not manifest.entries:
        raise DataError("empty manifest")
    root = Path(manifest_path).parent
    out_root = Path(out_dir)
    images = [load_image(root / e.path) for e in manifest.entries]
    expanded = expand_degraded(images, base_seed=seed)
    out_entries = []
    for (variant, code), entry in zip(expanded,
                                      (e for e in manifest.entries for _ in range(8))):
        stem = Path(entry.path).stem
        rel = f"{entry.origin}/{stem}_d{code}.png"
        save_png(variant, out_root / rel)
        out_entries.append(ManifestEntry(rel, entry.label, entry.origin, code))
    out_manifest = DatasetManifest(entries=out_entries)
    out_manifest.save(out_root / "manifest.csv")
    _emit({"inputs": len(manifest.entries), "outputs": len(out_entries),
           "manifest": str(out_root / "manifest.csv")})


@cli.command("build-dataset")
@click.option("--in", "manifest_paths", required=True, multiple=True, type=click.Path())
@click.option("--per-label", required=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", default=0, type=int, show_default=True)
def build_dataset(manifest_paths, per_label, out_path, seed):
    """Sample a label-balanced manifest from one or more source manifests.

    Image paths are rebased relative to the output manifest and every sampled
    entry is checked to decode before the manifest is written.
    """
    import os

    out_root = Path(out_path).resolve().parent
    manifests = []
    for p in manifest_paths:
        src_root = Path(p).resolve().parent
        loaded = DatasetManifest.load(p)
        rebased = [
            ManifestEntry(
                os.path.relpath(src_root / e.path, out_root).replace(os.sep, "/"),
                e.label, e.origin, e.degradation_code)
            for e in loaded.entries
        ]
        manifests.append(DatasetManifest(entries=rebased))
    balanced = build_balanced(manifests, per_label=per_label, seed=seed)
    out_root.mkdir(parents=True, exist_ok=True)  # ".."-relative paths need it
    balanced.validate_images(out_root)
    balanced.save(out_path)
    _emit({"total": len(balanced.entries), "per_label": per_label,
           "manifest": str(out_path)})


@cli.command()
@click.option("--data", "data_path", required=True, type=click.Path())
@click.option("--epochs", required=True, type=int)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--lr", default=1e-3, type=float, show_default=True)
@click.option("--batch", default=32, type=int, show_default=True)
@click.option("--seed", default=0, type=int, show_default=True)
def train(data_path, epochs, out_path, lr, batch, seed):
    """Train the grading network; per-epoch metrics stream as JSON lines."""
    if epochs < 0:
        raise click.UsageError("--epochs must be >= 0")
    manifest = DatasetManifest.load(data_path)
    model = model_mod.build(model_mod.ModelConfig(seed=seed))
    if epochs > 0:
        model_mod.train(
            model, manifest, epochs=epochs, batch_size=batch, lr=lr, seed=seed,
            root=Path(data_path).parent,
            progress=lambda ep, loss, acc: _emit(
                {"epoch": ep, "loss": loss, "accuracy": acc}),
        )
    model_mod.save(model, out_path)
    _emit({"checkpoint": str(out_path), "epochs": epochs,
           "final_loss": model.meta.get("final_loss"),
           "final_accuracy": model.meta.get("final_accuracy")})


@cli.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--data", "data_path", required=True, type=click.Path())
@click.option("--format", "fmt", default="table",
              type=click.Choice(["json", "table"]), show_default=True)
def eval_cmd(model_path, data_path, fmt):
    """Evaluate a checkpoint over a manifest and print the metric report."""
    model = model_mod.load(model_path, model_id=Path(model_path).stem)
    manifest = DatasetManifest.load(data_path)
    report = metrics_mod.report(model, manifest, root=Path(data_path).parent)
    if fmt == "json":
        sys.stdout.write(report.to_json() + "\n")
    else:
        sys.stdout.write(metrics_mod.format_table(report))
    sys.stdout.flush()


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--image", "image_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", default=50, type=int, show_default=True)
@click.option("--target", default="predicted", show_default=True,
              help='Grade 0-4 or "predicted".')
@click.option("--baseline", default="black", show_default=True,
              help='"black" or a path to a baseline image.')
def attribute(model_path, image_path, out_path, steps, target, baseline):
    """Write the integrated-gradients overlay PNG for one image."""
    model = model_mod.load(model_path, model_id=Path(model_path).stem)
    img = load_image(image_path)
    if target != "predicted":
        try:
            target = int(target)
        except ValueError:
            raise click.UsageError(f'--target must be 0-4 or "predicted", got {target!r}')
    if baseline != "black":
        from .fundus import preprocess
        baseline = preprocess(load_image(baseline), size=model.config.input_size).data
    try:
        config = attr_mod.IGConfig(baseline=baseline, steps=steps, target=target)
    except ValueError as exc:
        raise click.UsageError(str(exc))
    mask, overlay = attr_mod.overlay_for_image(model, img, config)
    save_png(overlay, out_path)
    result = model_mod.predict(model, img)
    _emit({
        "grade": result.grade,
        "probabilities": list(result.probabilities),
        "target_class": mask.target_class,
        "completeness_gap": mask.completeness_gap,
        "steps": mask.steps,
        "overlay": str(out_path),
    })


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path())
def serve(config_path):
    """Run the HTTP service until terminated."""
    from .service import ServiceConfig, create_app

    if not Path(config_path).exists():
        raise click.UsageError(f"config file not found: {config_path}")
    try:
        with open(config_path) as fh:
            raw = json.load(fh)
        config = ServiceConfig.from_file(config_path)
    except (ValueError, OSError) as exc:
        raise click.UsageError(f"bad config {config_path}: {exc}")
    if not Path(config.model_dir).is_dir():
        raise click.UsageError(f"model dir does not exist: {config.model_dir}")
    listen = raw.get("listen", "127.0.0.1:8080")
    host, _, port_s = listen.rpartition(":")
    try:
        port = int(port_s)
    except ValueError:
        raise click.UsageError(f"bad listen address {listen!r}")
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        probe.bind((host or "127.0.0.1", port))
    except OSError as exc:
        raise InternalError(f"cannot bind {listen}: {exc}")
    finally:
        probe.close()

    import signal
    import uvicorn

    app = create_app(config)
    # uvicorn re-raises SIGTERM after its graceful shutdown; absorb it so a
    # clean termination exits 0
    signal.signal(signal.SIGTERM, lambda signum, frame: None)
    uvicorn.run(app, host=host or "127.0.0.1", port=port, log_level="warning")


def run(argv=None) -> int:
    """Dispatch with the documented exit-code mapping."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.UsageError as exc:
        _fail_line("usage", exc.format_message())
        return EXIT_USAGE
    except click.ClickException as exc:
        _fail_line("usage", exc.message)
        return EXIT_USAGE
    except (DataError, model_mod.CheckpointError) as exc:
        _fail_line("data", str(exc))
        return EXIT_DATA
    except InternalError as exc:
        _fail_line("internal", str(exc))
        return EXIT_INTERNAL
    except click.exceptions.Abort:
        _fail_line("usage", "aborted")
        return EXIT_USAGE
    except Exception as exc:  # anything unplanned is an internal error
        _fail_line("internal", f"{type(exc).__name__}: {exc}")
        return EXIT_INTERNAL


def main(argv=None) -> None:
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
