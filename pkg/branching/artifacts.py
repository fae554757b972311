"""Files written and read by the management commands.

A model directory holds ``model.json`` (manifest) and ``model.bin``
(weights). A run directory adds the DOT graph, the trace, a text report,
the loss curves and per-round affinity and loss-table CSVs.
"""
import json
import logging
from pathlib import Path

from .affinity import AffinityMatrix
from .exceptions import CorruptionError
from .grouping import WideningDecision
from .model_tree import export_dot, export_manifest, import_manifest

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'model.json'
BLOB_FILE = 'model.bin'
CONFIG_FILE = 'config.json'
TRACE_FILE = 'trace.json'


def dump_json(data):
    return json.dumps(data, indent=2, sort_keys=True) + '\n'


def write_json(path, data):
    Path(path).write_text(dump_json(data))


def write_config(directory, config):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_json(directory / CONFIG_FILE, config)


def write_model(directory, tree):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest, blob = export_manifest(tree)
    (directory / MANIFEST_FILE).write_bytes(manifest)
    (directory / BLOB_FILE).write_bytes(blob)
    logger.info('wrote model with %d parameters to %s', tree.param_count(), directory)


def load_model(path):
    """Load a model from its directory or from its ``model.json``."""
    path = Path(path)
    manifest = path / MANIFEST_FILE if path.is_dir() else path
    blob = manifest.with_name(BLOB_FILE)
    if not manifest.exists() or not blob.exists():
        raise CorruptionError(f'{path}: expected {MANIFEST_FILE} and {BLOB_FILE}')
    return import_manifest(manifest.read_bytes(), blob.read_bytes())


def write_run(directory, tree, trace):
    directory = Path(directory)
    write_model(directory, tree)
    (directory / 'model.dot').write_text(export_dot(tree))
    write_json(directory / TRACE_FILE, trace.to_dict())
    (directory / 'report.txt').write_text(trace.to_text())
    (directory / 'curves.csv').write_text(trace.curves_csv())
    for record in trace.rounds:
        task = AffinityMatrix(record.task_affinity['values'], record.task_affinity['labels'])
        lifted = AffinityMatrix(record.branch_affinity['values'], record.branch_affinity['labels'])
        (directory / f'affinity_round{record.round}.csv').write_text(task.to_csv())
        (directory / f'branch_affinity_round{record.round}.csv').write_text(lifted.to_csv())
        (directory / f'losses_round{record.round}.csv').write_text(
            WideningDecision.from_dict(record.decision).to_csv()
        )
    logger.info('wrote run artifacts for %s to %s', trace.model_name, directory)


def load_trace(directory):
    path = Path(directory) / TRACE_FILE
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptionError(f'{path}: {exc}') from exc
