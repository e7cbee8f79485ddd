from pathlib import Path

from experiments.runs import RunCommand
from phantom.dataset import PhantomConfig, make_dataset
from phantom.io import Manifest


class Command(RunCommand):
    help = 'Generate the synthetic multi-echo placenta dataset'
    run_name = 'phantom'

    def default_out(self, config):
        return Path(config['output']['dataset_dir'])

    def run(self, config, out_dir, options):
        phantom = PhantomConfig.from_section(config['phantom'], seed=config['seeds']['phantom'])
        make_dataset(phantom, out_dir)
        manifest = Manifest.load(out_dir)
        return f"Wrote {len(manifest.records)} images for {phantom.subjects} subjects to {out_dir}"
