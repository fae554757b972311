from pathlib import Path

from branching.artifacts import dump_json, load_model, write_config, write_run
from branching.datagen import load_truth
from branching.grouping import adjusted_rand_index
from branching.management.base import BranchingCommand
from branching.models import RunManager
from branching.serializers import RunSerializer
from branching.trainer import adaptive_widen_train


class Command(BranchingCommand):
    help = 'Train a branched multi-task model with adaptive widening.'

    def add_arguments(self, parser):
        parser.add_argument('--data', required=True, help='dataset file or gen-data output directory')
        parser.add_argument('--out', required=True, help='output run directory')
        parser.add_argument('--wide', default=None, help='wide model directory for SOMP initialisation')
        parser.add_argument('--truth', default=None, help='truth file of planted groups to score the output partition')
        parser.add_argument('--no-register', action='store_true', help='do not record the run in the run index')
        self.add_train_arguments(parser)

    def handle(self, *args, **options):
        cfg = self.train_config(options)
        data = self.load_data(options['data'])
        wide = load_model(options['wide']) if options['wide'] else None
        truth = load_truth(options['truth']) if options['truth'] else None
        if truth is not None and len(truth['group_assignment']) != data.task_count:
            raise self.usage_error('the truth file describes a different number of tasks')
        train, val = data.split(cfg.val_fraction, cfg.seed)

        tree, trace = adaptive_widen_train(train, cfg, wide=wide, val=val)
        if truth is not None:
            learned = [0] * data.task_count
            for group, tasks in enumerate(tree.output_partition()):
                for task in tasks:
                    learned[task] = group
            trace.recovery = {
                'planted': truth['group_assignment'],
                'learned': learned,
                'adjusted_rand_index': adjusted_rand_index(truth['group_assignment'], learned),
            }

        out = Path(options['out'])
        write_run(out, tree, trace)
        config = {
            'command': 'train-adaptive',
            'data': options['data'],
            'wide': options['wide'],
            'truth': options['truth'],
            'model_name': trace.model_name,
            'train': cfg.to_dict(),
        }
        write_config(out, config)
        if not options['no_register']:
            serializer = RunSerializer(data={
                'name': trace.model_name,
                'out_dir': str(out),
                'command': 'train-adaptive',
                'task_count': data.task_count,
                'widenings': trace.widenings,
                'param_count': tree.param_count(),
            })
            serializer.is_valid(raise_exception=True)
            RunManager().register(dict(serializer.validated_data))

        self.write_line(dump_json({
            'out': str(out),
            'model_name': trace.model_name,
            'widenings': trace.widenings,
            'partition': trace.partition,
            'metrics': trace.metrics,
            'recovery': trace.recovery,
        }))
