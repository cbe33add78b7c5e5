import numpy as np
import pytest

from icm import codec, corpus as corpus_mod, probmodel, tasks, training


TINY_CODEC = dict(base_channels=4, latent_channels=2, num_down_stages=2)
TINY_PROB = dict(latent_channels=2, hidden_channels=8, num_levels=2)


@pytest.fixture(scope="module")
def tiny_world():
    data = corpus_mod.generate_corpus(seed=21, count=10, size=16)
    held = corpus_mod.generate_corpus(seed=22, count=4, size=16)
    tm = tasks.train_task_model(data, tasks.TaskConfig(seed=2), epochs=6, seed=3)
    return data, held, tm


def _cfgs(seed=0):
    return (codec.CodecConfig(seed=seed, **TINY_CODEC),
            probmodel.ProbConfig(seed=seed, **TINY_PROB))


def test_single_image_single_epoch_bookkeeping(tiny_world):
    data, held, tm = tiny_world
    one = corpus_mod.Corpus(images=data.images[:1], labels=data.labels[:1])
    ccfg, pcfg = _cfgs()
    ckpts, logs = training.train(
        training.TrainConfig(epochs=1, batch_size=1, seed=0),
        one, held, tm, ccfg, pcfg)
    assert len(ckpts) == 1 and len(logs) == 1
    assert np.isfinite(ckpts[0].rd.bpp) and np.isfinite(ckpts[0].rd.metric)
    assert ckpts[0].rd.label == "epoch000"


def test_untrained_uniform_model_bpp(tiny_world):
    data, held, tm = tiny_world
    ccfg = codec.CodecConfig(seed=1, **TINY_CODEC)
    pcfg = probmodel.ProbConfig(latent_channels=2, hidden_channels=8, num_levels=1, seed=1)
    cw = codec.init_codec(ccfg)
    pw = probmodel.init_probmodel(pcfg)
    rd = training.evaluate_checkpoint(cw, pw, held, tm, label="init")
    latent_elems = 2 * 4 * 4  # 16x16 image, 2 stages, 2 channels
    assert rd.bpp == pytest.approx(6 * latent_elems / (16 * 16), rel=1e-6)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_rate_only_training_reduces_bpp(tiny_world, seed):
    data, held, tm = tiny_world
    ccfg, pcfg = _cfgs(seed)
    ckpts, logs = training.train(
        training.TrainConfig(epochs=5, batch_size=5, learning_rate=2e-3, seed=seed,
                             schedule=((1.0, 0.0, 0.0),)),
        data, held, tm, ccfg, pcfg)
    bpps = [c.rd.bpp for c in ckpts]
    assert all(b2 < b1 for b1, b2 in zip(bpps, bpps[1:])), bpps


def test_mse_only_training_improves_reconstruction(tiny_world):
    data, held, tm = tiny_world
    ccfg, pcfg = _cfgs(7)
    ckpts, logs = training.train(
        training.TrainConfig(epochs=10, batch_size=5, learning_rate=2e-3, seed=7,
                             schedule=((0.0, 0.0, 1.0),)),
        data, held, tm, ccfg, pcfg)
    assert logs[-1].mean_mse < logs[0].mean_mse

    # direct before/after on one image
    from icm.autograd import Tensor

    img = data.images[0]
    cw0, pw0 = codec.init_codec(ccfg), probmodel.init_probmodel(pcfg)

    def recon_mse(cw):
        y = codec.encode(Tensor(img), cw)
        xh = codec.decode(codec.quantize(y, ccfg.quant_step), cw)
        return float(np.mean((xh.data - img) ** 2))

    assert recon_mse(ckpts[-1].codec_weights) < recon_mse(cw0)


def test_loss_decomposition_exact(tiny_world):
    data, held, tm = tiny_world
    ccfg, pcfg = _cfgs(3)
    ckpts, logs = training.train(
        training.TrainConfig(epochs=2, batch_size=5, seed=3),
        data, held, tm, ccfg, pcfg)
    for log in logs:
        w_rate, w_task, w_mse = log.weights
        want = w_rate * log.mean_rate_bpp + w_task * log.mean_task + w_mse * log.mean_mse
        assert log.train_loss == want  # identical float expression, exact


def test_task_model_frozen_through_training(tiny_world):
    data, held, tm = tiny_world
    before = tasks.params_checksum(tm)
    ccfg, pcfg = _cfgs(4)
    training.train(training.TrainConfig(epochs=2, batch_size=5, seed=4),
                   data, held, tm, ccfg, pcfg)
    assert tasks.params_checksum(tm) == before


def test_train_determinism(tiny_world):
    data, held, tm = tiny_world
    ccfg, pcfg = _cfgs(5)
    runs = []
    for _ in range(2):
        ckpts, _ = training.train(
            training.TrainConfig(epochs=2, batch_size=4, seed=5),
            data, held, tm, ccfg, pcfg)
        blob = b"".join(t.data.tobytes() for _, t in ckpts[-1].codec_weights.parameters())
        blob += b"".join(t.data.tobytes() for _, t in ckpts[-1].prob_weights.parameters())
        runs.append((blob, ckpts[-1].rd))
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_divergence_aborts_with_named_term(tiny_world):
    data, held, tm = tiny_world
    ccfg, pcfg = _cfgs(6)
    with pytest.raises(training.TrainDivergedError, match="non-finite"):
        training.train(
            training.TrainConfig(epochs=3, batch_size=5, learning_rate=1e8, seed=6),
            data, held, tm, ccfg, pcfg)


def test_checkpoint_roundtrip_bit_exact(tiny_world, tmp_path):
    data, held, tm = tiny_world
    ccfg, pcfg = _cfgs(8)
    ckpts, _ = training.train(
        training.TrainConfig(epochs=1, batch_size=5, seed=8),
        data, held, tm, ccfg, pcfg)
    ck = ckpts[0]
    path = tmp_path / "ck.bin"
    training.save_checkpoint(ck, path)
    back = training.load_checkpoint(path)
    assert back.epoch == ck.epoch
    assert back.rd == ck.rd
    for (n1, t1), (n2, t2) in zip(
            ck.codec_weights.parameters(), back.codec_weights.parameters()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()
    for (n1, t1), (n2, t2) in zip(
            ck.prob_weights.parameters(), back.prob_weights.parameters()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()

    # identical evaluation outputs after reload
    rd1 = training.evaluate_checkpoint(ck.codec_weights, ck.prob_weights, held, tm)
    rd2 = training.evaluate_checkpoint(back.codec_weights, back.prob_weights, held, tm)
    assert rd1 == rd2

    # corrupted file rejected
    raw = bytearray(path.read_bytes())
    raw[20] ^= 0xFF
    bad = tmp_path / "bad.bin"
    bad.write_bytes(bytes(raw))
    with pytest.raises(training.CheckpointFormatError):
        training.load_checkpoint(bad)


def test_requires_frozen_task_model(tiny_world):
    data, held, _ = tiny_world
    fresh = tasks.init_task_model(tasks.TaskConfig(seed=1))
    with pytest.raises(ValueError, match="frozen"):
        training.train(training.TrainConfig(epochs=1), data, held, fresh)
