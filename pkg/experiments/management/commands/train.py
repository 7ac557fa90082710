"""
Management command to train one hold-one-class-out fold.

WHEN: After gen_phantoms, once per (test class, arm)
HOW: Validates --config, trains with the held-out class excluded, writes the
     checkpoint (with config, digest and test class embedded) and the
     JSON-lines training log next to it
"""
from experiments.forms import load_run_config
from experiments.services import ExperimentService
from evaluation.services import arm_label
from segmentation.trainer import log_path_for
from utils.commands import PipelineCommand
from volumes.services import DatasetService


class Command(PipelineCommand):
    help = 'Train the masked U-Net on one fold and write an FSPM checkpoint'

    def add_arguments(self, parser):
        parser.add_argument('--data', type=str, required=True, help='Phantom directory (with manifest.json)')
        parser.add_argument('--test-class', type=int, required=True, help='Organ class held out of training')
        parser.add_argument('--config', type=str, required=True, help='Run config JSON file')
        parser.add_argument('--out', type=str, required=True, help='Checkpoint path (.fspm)')
        parser.add_argument('--weak-support', action='store_true',
                            help='SS-FSL arm: 1 full + 3 box support shots (default: all full)')

    def run(self, **options):
        run_config = load_run_config(options['config'])
        run_config = run_config.with_arm(options['weak_support'] or run_config.train.weak_support)
        records = DatasetService.load(options['data'])

        arm = arm_label(run_config.train.weak_support)
        self.stdout.write(
            f"🏋️ Training fold {options['test_class']} [{arm}] for {run_config.train.episodes} episodes "
            f"(config {run_config.digest[:12]})..."
        )
        result = ExperimentService.train(records, run_config, options['test_class'], options['out'])

        if result.log.records:
            last = result.log.records[-1]
            self.stdout.write(f"   last episode: nn {last.nn_loss:.4f} | wce {last.wce_loss:.4f}")
        self.stdout.write(self.style.SUCCESS(f"✅ Checkpoint written to {options['out']}"))
        self.stdout.write(f"   training log: {log_path_for(options['out'])}")
