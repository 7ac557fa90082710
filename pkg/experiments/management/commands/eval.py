"""
Management command to evaluate a trained fold on its held-out class.

HOW: Rebuilds the model from the config embedded in the checkpoint, refuses
     to run when the digest or the held-out class disagrees, and writes one
     volumetric dice per query patient as a JSON report
"""
from experiments.services import ExperimentService
from utils.commands import PipelineCommand
from volumes.services import DatasetService


class Command(PipelineCommand):
    help = 'Evaluate a checkpoint on the held-out class and write a dice report'

    def add_arguments(self, parser):
        parser.add_argument('--data', type=str, required=True, help='Phantom directory (with manifest.json)')
        parser.add_argument('--model', type=str, required=True, help='Checkpoint (.fspm)')
        parser.add_argument('--test-class', type=int, required=True, help='Held-out class the model was trained for')
        parser.add_argument('--report', type=str, required=True, help='Output JSON report')
        parser.add_argument('--pgm', type=str, default=None, help="Optional directory for PGM slice previews (hit 255, false positive 128, missed 64)")

    def run(self, **options):
        checkpoint, run_config = ExperimentService.load_trained(options['model'], options['test_class'])
        records = DatasetService.load(options['data'])
        report = ExperimentService.evaluate(
            records, checkpoint, run_config, options['test_class'],
            report_path=options['report'], preview_dir=options['pgm'],
        )
        for patient_id, score in report.entries:
            self.stdout.write(f"   patient {patient_id:3d}: dice {score:.4f}")
        self.stdout.write(
            self.style.SUCCESS(
                f"✅ Class {report.class_id} [{report.arm}]: mean {report.mean:.4f}, "
                f"median {report.median:.4f} over {len(report.entries)} patients -> {options['report']}"
            )
        )
