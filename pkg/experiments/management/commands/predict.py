"""
Management command for single-query inference.

HOW: The support image + mask pair becomes the support set (per the arm the
     checkpoint was trained in); every axial slice of the query volume is
     segmented and the binarised result is written as an FSV1 label mask
"""
from experiments.services import ExperimentService
from utils.commands import PipelineCommand
from volumes.formats import read_volume, write_volume


class Command(PipelineCommand):
    help = 'Segment one query volume from a support image/mask pair'

    def add_arguments(self, parser):
        parser.add_argument('--model', type=str, required=True, help='Checkpoint (.fspm)')
        parser.add_argument('--query', type=str, required=True, help='Query image volume (.fsv)')
        parser.add_argument('--support-img', type=str, required=True, help='Support image volume (.fsv)')
        parser.add_argument('--support-mask', type=str, required=True, help='Support full mask (.fsv)')
        parser.add_argument('--out', type=str, required=True, help='Output mask (.fsv)')

    def run(self, **options):
        checkpoint, run_config = ExperimentService.load_trained(options['model'])
        prediction = ExperimentService.predict(
            checkpoint,
            run_config,
            read_volume(options['query']),
            read_volume(options['support_img']),
            read_volume(options['support_mask']),
        )
        write_volume(options['out'], prediction)
        self.stdout.write(
            self.style.SUCCESS(
                f"✅ Wrote {int(prediction.foreground.sum())} foreground voxels "
                f"({prediction.dims[0]}x{prediction.dims[1]}x{prediction.dims[2]}) to {options['out']}"
            )
        )
