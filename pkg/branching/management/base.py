import logging
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from rest_framework import serializers

from branching.datagen import load
from branching.exceptions import BranchingError
from branching.trainer import TrainConfig

logger = logging.getLogger(__name__)

DATA_FILE = 'data.bgd'
TRUTH_FILE = 'truth.json'

TRAIN_FLAGS = (
    ('--omega', 'omega', int, 'thinness factor: conv width cap, dense widths are twice this'),
    ('--alpha', 'alpha', float, 'branching factor weighting the separation cost'),
    ('--l0', 'l0', float, 'unit cost of creating a branch'),
    ('--ema-decay', 'ema_decay', float, 'per-batch decay of the affinity estimates'),
    ('--lr', 'lr', float, 'SGD learning rate'),
    ('--momentum', 'momentum', float, 'SGD momentum'),
    ('--batch', 'batch_size', int, 'mini-batch size'),
    ('--iters-per-round', 'iters_per_round', int, 'training iterations per widening round'),
    ('--final-iters', 'final_iters', int, 'iterations of the final training phase'),
    ('--val-fraction', 'val_fraction', float, 'fraction of samples held out for validation'),
    ('--seed', 'seed', int, 'seed of every random stream'),
)


class BranchingCommand(BaseCommand):
    """Base for the toolkit commands.

    Toolkit and I/O failures exit with status 2, invalid configuration with
    status 1.
    """

    def execute(self, *args, **options):
        try:
            return super().execute(*args, **options)
        except serializers.ValidationError as exc:
            raise CommandError(f'invalid configuration: {_flatten(exc.detail)}', returncode=1) from exc
        except (BranchingError, OSError) as exc:
            logger.debug('command failed', exc_info=True)
            raise CommandError(str(exc), returncode=2) from exc

    def add_train_arguments(self, parser, only=None):
        defaults = settings.BRANCHING['TRAIN_DEFAULTS']
        for flag, dest, kind, text in TRAIN_FLAGS:
            if only is not None and dest not in only:
                continue
            parser.add_argument(flag, dest=dest, type=kind, default=defaults[dest], help=f'{text} (default: %(default)s)')

    def train_config(self, options):
        return TrainConfig.from_settings(**{dest: options.get(dest) for _, dest, _, _ in TRAIN_FLAGS})

    def load_data(self, path):
        path = Path(path)
        return load(path / DATA_FILE if path.is_dir() else path)

    def usage_error(self, message):
        return CommandError(message, returncode=1)

    def write_line(self, text):
        self.stdout.write(text.rstrip('\n'))


def _flatten(detail):
    if isinstance(detail, dict):
        return '; '.join(f'{key}: {_flatten(value)}' for key, value in detail.items())
    if isinstance(detail, list):
        return ' '.join(_flatten(value) for value in detail)
    return str(detail)
