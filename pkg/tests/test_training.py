import math
import struct

import numpy as np
import pytest

from mapre.corpus import RelationCatalog, generate_corpus
from mapre.encoder import EncoderConfig
from mapre.sampling import Episode, EpisodeSpec, sample_episode
from mapre.tensor import Tensor
from mapre.training.checkpoint import (MAGIC, Checkpoint, CheckpointChecksumError, CheckpointFormatError,
                                       CheckpointTruncatedError, CheckpointVersionError, checkpoint_from_model,
                                       decode_checkpoint, encode_checkpoint, load_checkpoint, model_from_checkpoint,
                                       save_checkpoint)
from mapre.training.fewshot import (FinetuneConfig, episode_scores, evaluate_episodes, finetune_fewshot,
                                    predict_zeroshot, sample_eval_episodes, score_episode, scores_from_embeddings)
from mapre.training.metrics import MetricsLogger, read_metrics
from mapre.training.model import ABLATIONS, ALPHA_INIT, BETA_INIT, FewShotHead, MapREModel
from mapre.training.pretrain import PretrainConfig, TrainingAborted, pretrain
from mapre.training.schedule import FULL_SCALE_LR, lr_schedule
from mapre.training.supervised import (SupervisedConfig, finetune_supervised, predict_supervised,
                                       split_instances, subsample_per_relation, supervised_logits)

SMALL = dict(num_layers=1, model_dim=8, num_heads=2, feedforward_dim=16, max_sequence_length=24)


@pytest.fixture(scope="module")
def data():
    kg, inst, vocab = generate_corpus(8, 6, 3, 96, seed=3, max_filler=1)
    return kg.catalog, inst, vocab


@pytest.fixture
def model(data):
    cat, inst, vocab = data
    return MapREModel(EncoderConfig(vocab_size=len(vocab), **SMALL), vocab, seed=0)


def _softmax(row):
    m = max(row)
    e = [math.exp(x - m) for x in row]
    s = sum(e)
    return [x / s for x in e]


class TestSchedule:
    def test_endpoints(self):
        assert lr_schedule(0, 50, 1e-3) == 0.0
        assert lr_schedule(50, 50, 1e-3) == 1e-3
        assert lr_schedule(25, 50, 1e-3) == pytest.approx(5e-4)
        assert lr_schedule(10_000, 50, 1e-3) == 1e-3

    def test_no_warmup(self):
        assert lr_schedule(0, 0, 2e-3) == 2e-3

    def test_full_scale_lr(self):
        assert FULL_SCALE_LR == 3e-5

    def test_negative_step(self):
        with pytest.raises(ValueError):
            lr_schedule(-1, 10, 1.0)


class TestScoring:
    def _episode(self, data, seed=0, k=1):
        cat, inst, _ = data
        return sample_episode(inst, EpisodeSpec(5, k, 4), seed=seed)

    def test_matches_scalar_oracle(self, data, model):
        cat = data[0]
        head = FewShotHead(0.7, 1.3)
        for seed in range(3):
            ep = self._episode(data, seed)
            probs = score_episode(model, head, ep, cat)
            U, W = model.embed_instances([s for row in ep.support for s in row])
            uq, wq = model.embed_instances([q for q, _ in ep.queries])
            V = model.embed_labels(cat, ep.relations)
            for qi in range(len(ep.queries)):
                row = [0.7 * sum(a * b for a, b in zip(uq[qi].tolist(), U[r].tolist()))
                       + 1.3 * sum(a * b for a, b in zip(wq[qi].tolist(), V[r].tolist())) for r in range(5)]
                np.testing.assert_allclose(probs[qi], _softmax(row), rtol=0, atol=1e-10)

    def test_rows_sum_to_one(self, data, model):
        probs = score_episode(model, FewShotHead(), self._episode(data, 1, k=2), data[0])
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)

    def test_k_zero_rejected(self, data, model):
        cat, inst, _ = data
        ep = sample_episode(inst, EpisodeSpec(5, 0, 1), seed=0)
        with pytest.raises(ValueError, match="predict_zeroshot"):
            score_episode(model, FewShotHead(), ep, cat)

    def test_k_one_prototype_is_the_support(self):
        rng = np.random.default_rng(0)
        us, uq = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
        got = episode_scores(Tensor(us), Tensor(uq), None, None, Tensor([1.0]), None, 3, 1).data
        np.testing.assert_allclose(got, uq @ us.T, atol=1e-12)

    def test_support_permutation_invariance(self):
        rng = np.random.default_rng(1)
        us = rng.normal(size=(3, 4, 6))
        uq = rng.normal(size=(2, 6))
        a = episode_scores(Tensor(us.reshape(12, 6)), Tensor(uq), None, None, Tensor([1.0]), None, 3, 4).data
        shuffled = us[:, rng.permutation(4)]
        b = episode_scores(Tensor(shuffled.reshape(12, 6)), Tensor(uq), None, None, Tensor([1.0]), None, 3, 4).data
        np.testing.assert_allclose(a, b, atol=1e-12)
        np.testing.assert_allclose(a, scores_from_embeddings(us, uq, None, np.zeros((3, 1)), 1.0, 0.0), atol=1e-12)

    def test_dominance_alpha_only(self):
        uq = np.array([[1.0, 0.0, 0.0]])
        us = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        s = episode_scores(Tensor(us), Tensor(uq), None, None, Tensor([1.0]), None, 3, 1).data
        assert s.argmax() == 1

    def test_argmax_equalities_on_random_episodes(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            us, uq = rng.normal(size=(5, 1, 6)), rng.normal(size=(3, 6))
            wq, v = rng.normal(size=(3, 3)), rng.normal(size=(5, 3))
            agn = scores_from_embeddings(us, uq, wq, v, 2.0, 0.0).argmax(axis=1)
            assert np.array_equal(agn, (uq @ us[:, 0].T).argmax(axis=1))
            aware = scores_from_embeddings(us, uq, wq, v, 0.0, 3.0).argmax(axis=1)
            assert np.array_equal(aware, (wq @ v.T).argmax(axis=1))
            s = scores_from_embeddings(us, uq, wq, v, 0.9, 1.1)
            assert np.array_equal(s.argmax(axis=1), (s + 7.5).argmax(axis=1))

    def test_both_terms_absent(self):
        with pytest.raises(ValueError):
            episode_scores(None, Tensor(np.ones((1, 2))), None, None, None, None, 2, 1)

    def test_cached_evaluation_matches_graph_scoring(self, data, model):
        cat, inst, _ = data
        head = FewShotHead(0.8, 1.2)
        eps = sample_eval_episodes(inst, EpisodeSpec(5, 2, 3), 5, seed=0)
        direct = np.mean([score_episode(model, head, ep, cat).argmax(axis=1) == [l for _, l in ep.queries]
                          for ep in eps])
        assert evaluate_episodes(model, eps, cat, 0.8, 1.2) == pytest.approx(direct)


class TestZeroShot:
    def test_single_candidate(self, data, model):
        cat, inst, _ = data
        assert predict_zeroshot(model, [cat.labels[cat.ids[0]]], inst[0]).tolist() == [1.0]

    def test_empty_candidates(self, data, model):
        with pytest.raises(ValueError):
            predict_zeroshot(model, [], data[1][0])

    def test_identity_with_alpha_zero_beta_one(self, data, model):
        cat, inst, _ = data
        ep = sample_episode(inst, EpisodeSpec(5, 1, 4), seed=5)
        via_episode = score_episode(model, FewShotHead(0.0, 1.0, False, False), ep, cat)
        labels = [cat.labels[r] for r in ep.relations]
        direct = predict_zeroshot(model, labels, [q for q, _ in ep.queries])
        np.testing.assert_allclose(via_episode, direct, rtol=0, atol=1e-12)


class TestHead:
    def test_init_values(self):
        assert (ALPHA_INIT, BETA_INIT) == (0.95, 1.05)
        assert FewShotHead().values == (0.95, 1.05)

    def test_ablation_modes(self):
        assert set(ABLATIONS) == {"both", "label-agnostic", "label-aware", "zeroshot"}
        assert set(FewShotHead.for_mode("label-agnostic").parameters()) == {"head.alpha"}
        assert FewShotHead.for_mode("label-aware").values == (0.0, 1.05)
        assert FewShotHead.for_mode("zeroshot").parameters() == {}
        with pytest.raises(ValueError):
            FewShotHead.for_mode("neither")

    def test_one_step_moves_alpha_or_beta(self, data, model):
        cat, inst, _ = data
        head = finetune_fewshot(model, inst, cat, FinetuneConfig(iterations=2, warmup_steps=0, lr=1e-2))
        assert head.values != (0.95, 1.05)

    def test_zeroshot_mode_keeps_coefficients(self, data, model):
        cat, inst, _ = data
        head = finetune_fewshot(model, inst, cat, FinetuneConfig(iterations=2, warmup_steps=0, mode="zeroshot"))
        assert head.values == (0.0, 1.0)


class TestPretrain:
    def test_zero_lr_leaves_parameters(self, data, model):
        cat, inst, _ = data
        before = {k: v.data.copy() for k, v in model.parameters().items()}
        pretrain(model, inst, cat, PretrainConfig(steps=1, warmup_steps=0, lr=0.0, batch_relations=4,
                                                  weight_decay=0.0))
        for k, v in model.parameters().items():
            assert np.array_equal(before[k], v.data), k

    def test_history_and_logging(self, data, model):
        cat, inst, _ = data
        log = MetricsLogger()
        hist = pretrain(model, inst, cat, PretrainConfig(steps=3, warmup_steps=1, batch_relations=4), logger=log)
        assert len(hist) == 3
        for rec in log.records:
            assert {"step", "l_ccr", "l_crr", "l_mlm", "total", "seed"} <= set(rec)
            assert rec["total"] == pytest.approx(rec["l_ccr"] + rec["l_crr"] + rec["l_mlm"])

    def test_nonfinite_loss_aborts_with_step(self, data, model):
        cat, inst, _ = data
        model.con.params["tok_emb"].data[:] = np.nan
        with pytest.raises(TrainingAborted) as ei:
            pretrain(model, inst, cat, PretrainConfig(steps=2, warmup_steps=0, batch_relations=4))
        assert ei.value.step == 0

    def test_config_invariant(self):
        with pytest.raises(ValueError):
            PretrainConfig(steps=10, warmup_steps=10)

    def test_desk_defaults(self):
        c = PretrainConfig()
        assert (c.steps, c.warmup_steps, c.batch_relations, c.blank_prob) == (500, 50, 8, 0.7)


class TestSupervised:
    def test_logit_widths(self, data, model):
        cat, inst, _ = data
        for variant in ("L", "R"):
            model.init_supervised_head(variant, len(cat))
            assert supervised_logits(model, variant, inst[:3], cat).shape == (3, len(cat))

    def test_r_uses_argmax_of_matching_scores(self, data, model):
        cat, inst, _ = data
        model.init_supervised_head("R", len(cat))
        u, _ = model.embed_instances(inst[:4])
        v = model.embed_labels(cat, cat.ids)
        proj = u @ model.heads["sigma.w"].data + model.heads["sigma.b_out"].data
        assert np.array_equal(predict_supervised(model, "R", inst[:4], cat), (proj @ v.T).argmax(axis=1))

    def test_single_class_catalog(self, data, model):
        cat, inst, _ = data
        rid = cat.ids[0]
        one = cat.subset([rid])
        items = [x for x in inst if x.relation == rid]
        for variant in ("L", "R"):
            acc = finetune_supervised(model, items, items, one, variant, SupervisedConfig(steps=1, warmup_steps=0))
            assert acc == 1.0

    def test_errors(self, data, model):
        cat, inst, _ = data
        with pytest.raises(ValueError, match="variant"):
            finetune_supervised(model, inst, inst, cat, "X", SupervisedConfig(steps=1))
        with pytest.raises(ValueError, match="catalog"):
            finetune_supervised(model, [], [], RelationCatalog({}), "R", SupervisedConfig(steps=1))
        with pytest.raises(ValueError, match="absent"):
            finetune_supervised(model, inst[:2], inst, cat, "L", SupervisedConfig(steps=1))

    def test_variant_l_leaves_relation_encoder(self, data, model):
        cat, inst, _ = data
        before = {k: v.data.copy() for k, v in model.encoder_parameters(("rel",)).items()}
        finetune_supervised(model, inst, inst[:5], cat, "L", SupervisedConfig(steps=2, warmup_steps=0))
        for k, v in model.encoder_parameters(("rel",)).items():
            assert np.array_equal(before[k], v.data)

    def test_subsample_keeps_every_relation(self, data):
        _, inst, _ = data
        sub = subsample_per_relation(inst, 0.01, seed=0)
        assert {x.relation for x in sub} == {x.relation for x in inst}
        assert len(sub) == len({x.relation for x in inst})
        assert len(subsample_per_relation(inst, 0.5, seed=0)) == round(0.5 * len(inst))

    def test_split_instances(self, data):
        _, inst, _ = data
        train, test = split_instances(inst, 0.2, seed=0)
        assert len(train) + len(test) == len(inst)
        assert not {id(x) for x in train} & {id(x) for x in test}
        assert {x.relation for x in train} == {x.relation for x in test} == {x.relation for x in inst}
        with pytest.raises(ValueError):
            split_instances(inst[:1], 0.2)
        with pytest.raises(ValueError):
            split_instances(inst, 1.0)


class TestCheckpoint:
    def _ckpt(self):
        rng = np.random.default_rng(0)
        return Checkpoint({"a": rng.normal(size=(2, 3)), "b": np.array([np.pi, -0.0, 1e-300])},
                          {"k": [1, 2]}, step=7)

    def test_round_trip_bit_exact(self, tmp_path):
        ck = self._ckpt()
        save_checkpoint(ck, tmp_path / "x.ckpt")
        back = load_checkpoint(tmp_path / "x.ckpt")
        for k in ck.arrays:
            assert ck.arrays[k].tobytes() == back.arrays[k].tobytes()
        assert back.step == 7 and back.config == {"k": [1, 2]}

    def test_save_load_save_byte_identical(self, tmp_path):
        save_checkpoint(self._ckpt(), tmp_path / "1.ckpt")
        save_checkpoint(load_checkpoint(tmp_path / "1.ckpt"), tmp_path / "2.ckpt")
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()

    def test_layout(self):
        blob = encode_checkpoint(self._ckpt())
        assert blob[:6] == MAGIC + b"\x01"
        (n,) = struct.unpack_from("<I", blob, 6)
        assert blob[10:10 + n].startswith(b"{")
        assert len(blob) == 10 + n + 8 * (6 + 3) + 4

    @pytest.mark.parametrize("cut", [3, 8, 20, -5, -1])
    def test_truncation(self, cut):
        blob = encode_checkpoint(self._ckpt())
        with pytest.raises(CheckpointTruncatedError):
            decode_checkpoint(blob[:cut])

    def test_checksum(self):
        blob = bytearray(encode_checkpoint(self._ckpt()))
        blob[-12] ^= 0xFF
        with pytest.raises(CheckpointChecksumError):
            decode_checkpoint(bytes(blob))

    def test_version(self):
        blob = bytearray(encode_checkpoint(self._ckpt()))
        blob[5] = 2
        with pytest.raises(CheckpointVersionError):
            decode_checkpoint(bytes(blob))

    def test_bad_magic(self):
        with pytest.raises(CheckpointFormatError):
            decode_checkpoint(b"NOTIT\x01" + b"\x00" * 20)

    def test_model_forward_identical_after_reload(self, data, model, tmp_path):
        cat, inst, vocab = data
        model.fewshot = FewShotHead(0.3, 0.4)
        save_checkpoint(checkpoint_from_model(model, step=3), tmp_path / "m.ckpt")
        again = model_from_checkpoint(load_checkpoint(tmp_path / "m.ckpt"), vocab)
        a, b = model.embed_instances(inst[:6]), again.embed_instances(inst[:6])
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
        assert again.fewshot.values == (0.3, 0.4)
        assert model.embed_labels(cat, cat.ids).tobytes() == again.embed_labels(cat, cat.ids).tobytes()


class TestMetrics:
    def test_header_and_records(self, tmp_path):
        log = MetricsLogger(tmp_path / "m.jsonl", header={"seed": 1})
        log.log({"step": 0, "loss": float("nan")})
        recs = read_metrics(tmp_path / "m.jsonl")
        assert recs[0] == {"seed": 1, "kind": "config"}
        assert recs[1] == {"step": 0, "loss": "nan"}

    def test_fixed_seed_runs_write_identical_files(self, data, tmp_path):
        cat, inst, vocab = data
        for k in range(2):
            m = MapREModel(EncoderConfig(vocab_size=len(vocab), **SMALL), vocab, seed=4)
            log = MetricsLogger(tmp_path / f"{k}.jsonl", header={"seed": 4})
            pretrain(m, inst, cat, PretrainConfig(steps=3, warmup_steps=1, batch_relations=4, seed=4), logger=log)
            finetune_fewshot(m, inst, cat, FinetuneConfig(iterations=2, warmup_steps=0, seed=4), logger=log)
        assert (tmp_path / "0.jsonl").read_bytes() == (tmp_path / "1.jsonl").read_bytes()


def test_tied_initialisation(data):
    _, _, vocab = data
    m = MapREModel(EncoderConfig(vocab_size=len(vocab), **SMALL), vocab, seed=0)
    for k in m.con.params:
        assert np.array_equal(m.con.params[k].data, m.rel.params[k].data)
    shared = MapREModel(EncoderConfig(vocab_size=len(vocab), **SMALL), vocab, seed=0, share_encoders=True)
    assert shared.rel is shared.con
    assert not any(k.startswith("rel.") for k in shared.parameters())


def test_vocab_larger_than_config(data):
    _, _, vocab = data
    with pytest.raises(ValueError):
        MapREModel(EncoderConfig(vocab_size=10, **SMALL), vocab)
