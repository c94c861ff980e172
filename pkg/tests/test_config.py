import pytest

from coupledmil.config import ConfigError, RunConfig, build_dataset, from_ini, preset, to_ini


def test_roundtrip_and_hash():
    cfg = RunConfig()
    cfg.dataset.separation = 1.25
    cfg.stage_one.head_widths = (16, 8)
    cfg.icmil.iterations = 1.5
    back = from_ini(to_ini(cfg))
    assert back == cfg
    assert back.hash() == cfg.hash()
    assert from_ini(to_ini(RunConfig())).hash() != cfg.hash()


def test_partial_file_overlays_defaults():
    cfg = from_ini("[coupling]\nlearning_rate = 0.01  ; faster\n[icmil]\niterations = 2 # two rounds\n")
    assert cfg.coupling.learning_rate == 0.01 and cfg.icmil.iterations == 2
    assert cfg.stage_one == RunConfig().stage_one
    # the coupling block trains with the run-level augmentation spec
    assert cfg.coupling.augment == cfg.augment


@pytest.mark.parametrize("text", [
    "[stage_one]\nepoch = 3\n",
    "[optimizer]\nlr = 1\n",
    "[coupling]\naugment = none\n",
    "[icmil]\niterations = 0.7\n",
    "[icmil]\ncoupling_mode = greedy\n",
    "[dataset]\nkind = mnist\n",
    "[stage_one]\nepochs = many\n",
])
def test_rejections(text):
    with pytest.raises(ConfigError):
        from_ini(text)


def test_with_seed_sets_every_component():
    cfg = RunConfig().with_seed(7)
    seeds = (cfg.seed, cfg.dataset.seed, cfg.dataset.split_seed, cfg.model.seed,
             cfg.stage_one.seed, cfg.coupling.seed)
    assert seeds == (7,) * 6
    assert RunConfig().seed == 0


def test_presets():
    paper = preset("paper")
    assert (paper.stage_one.learning_rate, paper.coupling.learning_rate) == (2e-4, 1e-5)
    assert (paper.stage_one.epochs, paper.coupling.iterations, paper.coupling.batch_size) == (200, 10000, 100)
    assert paper.embedder_arch((3, 224, 224)).hidden_dim == 512
    assert preset("desk") == RunConfig()
    with pytest.raises(ConfigError):
        preset("laptop")


def test_directory_dataset_needs_path():
    cfg = from_ini("[dataset]\nkind = directory\n")
    with pytest.raises(ConfigError):
        build_dataset(cfg.dataset)
