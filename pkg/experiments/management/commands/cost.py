"""
Management command printing the annotation-cost ratio of a support set
against full-shot annotation (a box counts as 1/weak-factor of a mask).
"""
from evaluation.metrics import annotation_cost_ratio
from segmentation.config import fewshot_setting
from utils.commands import PipelineCommand


class Command(PipelineCommand):
    help = 'Annotation-cost ratio: full-shot annotations / (full + weak / factor)'

    def add_arguments(self, parser):
        parser.add_argument('--full-shot', type=int, required=True, help='Annotations a fully supervised model needs')
        parser.add_argument('--support-full', type=int, required=True, help='Full masks in the support set')
        parser.add_argument('--support-weak', type=int, required=True, help='Box annotations in the support set')
        parser.add_argument('--weak-factor', type=float, default=None,
                            help='How many times cheaper a box is than a mask (default: 15)')

    def run(self, **options):
        factor = options['weak_factor']
        if factor is None:
            factor = fewshot_setting('WEAK_FACTOR', 15.0)
        ratio = annotation_cost_ratio(
            options['full_shot'], options['support_full'], options['support_weak'], factor
        )
        self.stdout.write(self.style.SUCCESS(f"{ratio:.1f}"))
