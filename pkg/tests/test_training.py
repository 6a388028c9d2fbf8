import numpy as np
import pytest

from lstransducer import training as tr
from lstransducer.data import SynthConfig, generate_text
from lstransducer.model import BOS, Transducer
from lstransducer.tensor import Tape

from conftest import tiny_config


def test_compose_example():
    assert tr.compose(ce=1, ctc=2, qua=0.5, L=5, beta=0.6, gamma=0.05) == pytest.approx(1.725)
    assert tr.compose(ce=9, ctc=2, qua=0.5, L=5, beta=1.0, gamma=0.05) == pytest.approx(2.125)


@pytest.mark.parametrize("bad", [dict(beta=1.5), dict(beta=-0.1), dict(gamma=-1), dict(epsilon_jitter=-1)])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        tr.TrainConfig(**bad)


def test_freeze_accepts_comma_string():
    assert tr.TrainConfig(freeze="pred_net,joint.fc_p").freeze == ("pred_net", "joint.fc_p")


def test_recomposition_identity(tiny_model, small_data):
    cfg = tr.TrainConfig()
    loss = tr.forward_loss(tiny_model, tr.collate(small_data["train"][:6]), cfg)
    for it in loss.items:
        assert abs(it.total - tr.compose(it.ce, it.ctc, it.qua, it.L, cfg.beta, cfg.gamma)) <= 1e-12
    assert loss.total.item() == pytest.approx(np.mean([it.total for it in loss.items]), abs=1e-12)


def test_ce_includes_eos_and_is_mean_per_position(tiny_model, small_data):
    batch = tr.collate(small_data["train"][:1])
    inp, out, wts = tr._decoder_io(batch.targets)
    L = len(batch.targets[0])
    assert inp[0, 0] == BOS and out[0, L] == 1
    assert wts[0].sum() == pytest.approx(1.0) and np.count_nonzero(wts[0]) == L + 1


def test_beta_one_ignores_ce(tiny_model, small_data):
    batch = tr.collate(small_data["train"][:3])
    for it in tr.forward_loss(tiny_model, batch, tr.TrainConfig(beta=1.0)).items:
        assert it.total == pytest.approx(it.ctc + 0.05 * it.qua * it.L)


def test_padding_invariance(tiny_model, small_data):
    recs = small_data["train"][:4]
    alone = tr.forward_loss(tiny_model, tr.collate(recs[:1]), tr.TrainConfig()).items[0]
    together = tr.forward_loss(tiny_model, tr.collate(recs), tr.TrainConfig()).items[0]
    assert together.total == pytest.approx(alone.total, rel=1e-10)


def test_full_gradient_check(small_synth, small_data):
    model = Transducer(tiny_config(small_synth, pred_layers=1), seed=0)
    assert model.params.count() <= 5000
    batch = tr.collate(small_data["train"][:2])
    assert tr.gradcheck(model, batch, tr.TrainConfig()) < 1e-3


def test_gradient_check_with_dotproduct_and_epsilon(small_synth, small_data):
    model = Transducer(tiny_config(small_synth, pred_layers=1, aif_mode="dotproduct"), seed=1)
    batch = tr.collate(small_data["train"][2:4])
    assert tr.gradcheck(model, batch, tr.TrainConfig(epsilon_train=1.0), max_entries=300) < 1e-3


def test_teacher_boundaries_per_utterance_epsilon():
    c = np.cumsum(np.full((2, 8), 0.5), axis=1)
    b = tr.teacher_boundaries(c, np.array([8, 4]), 3, np.array([0.0, 1.0]))
    assert b.tolist() == [[2, 4, 6], [4, 4, 4]]


def test_one_epoch_reduces_loss(small_synth, small_data):
    model = Transducer(tiny_config(small_synth), seed=0)
    data = small_data["train"][:8]
    cfg = tr.TrainConfig(epochs=1, batch_size=2, lr=5e-3, warmup=1)
    before = tr.evaluate_loss(model, data, cfg)["total"]
    tr.train(model, data, cfg)
    assert tr.evaluate_loss(model, data, cfg)["total"] < before


def test_training_is_deterministic(small_synth, small_data):
    runs = []
    for _ in range(2):
        model = Transducer(tiny_config(small_synth), seed=3)
        log = tr.train(model, small_data["train"], tr.TrainConfig(epochs=2, batch_size=4, epsilon_jitter=2.0),
                       dev=small_data["dev"])
        runs.append((log, model.params.arrays()))
    assert runs[0][0] == runs[1][0]
    assert all(np.array_equal(runs[0][1][k], runs[1][1][k]) for k in runs[0][1])
    assert {r["split"] for r in runs[0][0]} == {"train", "dev"}


def test_freeze_is_airtight(small_synth, small_data):
    model = Transducer(tiny_config(small_synth), seed=0)
    before = {n: t.data.copy() for n, t in model.params.items()}
    tr.train(model, small_data["train"], tr.TrainConfig(epochs=2, batch_size=4, freeze=("pred_net",)))
    for n, t in model.params.items():
        if n.startswith("pred_net."):
            assert np.array_equal(t.data, before[n])
    assert not np.array_equal(model.params["encoder.inp.w"].data, before["encoder.inp.w"])


def test_adam_warmup_schedule(tiny_model):
    opt = tr.Adam(tiny_model.params, lr=1.0, warmup=4)
    assert [opt.rate(s) for s in (1, 2, 4, 16)] == pytest.approx([0.25, 0.5, 1.0, 0.5])


def test_adam_rejects_nonfinite_gradient(tiny_model):
    for _, t in tiny_model.params.items():
        t.grad = np.full(t.shape, np.nan)
    with pytest.raises(tr.TrainingDiverged):
        tr.Adam(tiny_model.params, 1e-3, 10).step()


def test_gradient_clipping_bounds_update(tiny_model):
    for _, t in tiny_model.params.items():
        t.grad = np.full(t.shape, 100.0)
    assert tr.Adam(tiny_model.params, 1e-3, 10, grad_clip=5.0).step() > 5.0


def test_divergence_reported(small_synth, small_data, monkeypatch):
    model = Transducer(tiny_config(small_synth), seed=0)
    real = tr.forward_loss

    def broken(*a, **kw):
        out = real(*a, **kw)
        out.total.data = np.array(np.nan)
        return out

    monkeypatch.setattr(tr, "forward_loss", broken)
    with pytest.raises(tr.TrainingDiverged, match="ce="):
        tr.train(model, small_data["train"][:4], tr.TrainConfig(epochs=1))


def test_empty_dataset_rejected(tiny_model):
    with pytest.raises(ValueError):
        tr.train(tiny_model, [], tr.TrainConfig())
    with pytest.raises(ValueError):
        tr.pretrain_lm(tiny_model, [], tr.TrainConfig())


# ---------------------------------------------------------------- language model

@pytest.fixture(scope="module")
def text_synth():
    return SynthConfig(src_vocab=8, min_len=2, max_len=4)


def lm_model(synth, seed=0):
    return Transducer(tiny_config(synth, d_model=16, ff_dim=16), seed=seed)


def test_pretraining_lowers_heldout_perplexity(text_synth):
    wins = 0
    for seed in range(3):
        corpus = generate_text(text_synth, 200, "skewed-markov", seed)
        held = generate_text(text_synth, 50, "skewed-markov", seed + 100)
        model = lm_model(text_synth, seed)
        log = tr.pretrain_lm(model, corpus, tr.TrainConfig(epochs=3, batch_size=16, seed=seed), heldout=held)
        dev = [r["perplexity"] for r in log if r["split"] == "dev"]
        wins += dev[-1] < dev[0]
    assert wins >= 2


def test_pretraining_touches_only_lm_parameters(text_synth):
    model = lm_model(text_synth)
    before = model.params.arrays()
    before = {k: v.copy() for k, v in before.items()}
    tr.pretrain_lm(model, generate_text(text_synth, 40, "uniform", 0), tr.TrainConfig(epochs=1, batch_size=8))
    for n, t in model.params.items():
        moved = not np.array_equal(t.data, before[n])
        assert moved == (n.startswith("pred_net.") or n.startswith("joint.fc_p."))
    assert model.params.frozen == []


def test_unigram_skewed_corpus_learns_modal_first_token(text_synth):
    corpus = [[5, 3]] * 60 + [[7, 3]] * 10 + [[4]] * 10
    model = lm_model(text_synth)
    tr.pretrain_lm(model, corpus, tr.TrainConfig(epochs=20, batch_size=16, lr=5e-3, warmup=10))
    from lstransducer.model import predict
    from lstransducer.tensor import Tensor
    h, _, _ = predict(model, [BOS])
    assert int(np.argmax(model.lm_logits(Tensor(h)).data)) == 5


def test_adaptation_freezes_everything_but_upper_prediction_network(text_synth):
    model = lm_model(text_synth)
    before = {k: v.copy() for k, v in model.params.arrays().items()}
    corpus = generate_text(text_synth, 40, "skewed-markov", 1)
    tr.adapt_prediction_network(model, corpus, tr.TrainConfig(epochs=1, batch_size=8))
    pinned = tr.query_path(model)
    for n, t in model.params.items():
        moved = not np.array_equal(t.data, before[n])
        movable = (n.startswith("pred_net.") or n.startswith("joint.fc_p.")) and not any(
            n == p or n.startswith(p + ".") for p in pinned)
        assert moved == movable, n


def test_whole_network_adaptation(text_synth):
    model = lm_model(text_synth)
    before = model.params["pred_net.embed"].data.copy()
    tr.adapt_prediction_network(model, generate_text(text_synth, 40, "skewed-markov", 1),
                                tr.TrainConfig(epochs=1, batch_size=8), keep_query_path=False)
    assert not np.array_equal(model.params["pred_net.embed"].data, before)


def test_adaptation_improves_target_domain_perplexity(text_synth):
    wins = 0
    for seed in range(3):
        model = lm_model(text_synth, seed)
        tr.pretrain_lm(model, generate_text(text_synth, 200, "uniform", seed), tr.TrainConfig(epochs=2, batch_size=16))
        held = generate_text(text_synth, 60, "skewed-markov", 500 + seed)
        before = tr.lm_perplexity(model, held)
        tr.adapt_prediction_network(model, generate_text(text_synth, 300, "skewed-markov", seed),
                                    tr.TrainConfig(epochs=3, batch_size=16, warmup=20))
        wins += tr.lm_perplexity(model, held) < before
    assert wins >= 2


def test_init_from_lm_copies_and_freezes(text_synth, small_data):
    lm = lm_model(text_synth, seed=1)
    model = lm_model(text_synth, seed=2)
    tr.init_from_lm(model, lm)
    for n in lm.params.names("pred_net") + lm.params.names("joint.fc_p"):
        assert np.array_equal(model.params[n].data, lm.params[n].data)
        assert model.params.is_frozen(n)
    assert not np.array_equal(model.params["encoder.inp.w"].data, lm.params["encoder.inp.w"].data)
