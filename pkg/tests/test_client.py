"""Client lifecycle: local training rounds and the privacy of the upload."""

import dataclasses
import json

import numpy as np
import pytest

from fedovl.adapter import init_adapter
from fedovl.client import ClientState, ClientUpdate, local_train, make_client, make_update
from fedovl.numerics import RngStream, l2_normalize
from fedovl.training import TrainConfig, loss_backward


def separable_shard(seed=0, d=8, shots=6):
    """Two well-separated classes with matching prompts."""
    rng = RngStream(seed, 50)
    mu = {"left": l2_normalize(rng.normal(d)), "right": l2_normalize(rng.normal(d))}
    prompts = {c: mu[c] for c in mu}
    shard = []
    for c in mu:
        for _ in range(shots):
            shard.append((l2_normalize(mu[c] + 0.2 * rng.normal(d)), c))
    return shard, prompts


def fresh_client(seed=0, alpha=1.0):
    shard, prompts = separable_shard(seed)
    return make_client(0, shard, prompts, alpha, seed)


class TestLocalTrain:
    def test_zero_epochs_copies_global_adapter(self):
        client = fresh_client()
        global_adapter = init_adapter(RngStream(1, 0), 8, 8)
        out = local_train(client, global_adapter, TrainConfig(local_epochs=0))
        np.testing.assert_array_equal(out.adapter.w1, global_adapter.w1)
        np.testing.assert_array_equal(out.adapter.b2, global_adapter.b2)
        assert out.adapter is not global_adapter  # broadcast is a copy

    def test_zero_learning_rate_freezes_weights(self):
        client = fresh_client()
        global_adapter = init_adapter(RngStream(1, 0), 8, 8)
        cfg = TrainConfig(learning_rate=0.0, local_epochs=2)
        out = local_train(client, global_adapter, cfg)
        np.testing.assert_array_equal(out.adapter.w1, global_adapter.w1)
        np.testing.assert_array_equal(out.adapter.w2, global_adapter.w2)
        for c in out.residuals.deltas:
            np.testing.assert_array_equal(out.residuals.deltas[c], np.zeros(8))

    def test_two_epochs_reduce_loss_on_separable_shard(self):
        client = fresh_client()
        global_adapter = init_adapter(RngStream(1, 0), 8, 8)
        cfg = TrainConfig(learning_rate=1e-3, local_epochs=2)
        out = local_train(client, global_adapter, cfg)
        vectors = np.stack([z for z, _ in client.shard])
        labels = [y for _, y in client.shard]
        final_loss, _ = loss_backward(
            vectors, labels, out.adapter, out.residuals, client.prompt_embeddings, cfg
        )
        assert final_loss < out.loss_trace[0]
        assert out.loss_trace == sorted(out.loss_trace, reverse=True)

    def test_input_state_not_mutated(self):
        client = fresh_client()
        global_adapter = init_adapter(RngStream(1, 0), 8, 8)
        local_train(client, global_adapter, TrainConfig(learning_rate=1e-3))
        assert client.adapter is None
        for c in client.residuals.deltas:
            np.testing.assert_array_equal(client.residuals.deltas[c], np.zeros(8))

    def test_empty_shard_rejected(self):
        shard, prompts = separable_shard()
        client = make_client(0, shard, prompts, 1.0, 0)
        client = dataclasses.replace(client, shard=[])
        with pytest.raises(ValueError):
            local_train(client, init_adapter(RngStream(1, 0), 8, 8), TrainConfig())

    def test_residuals_persist_across_rounds(self):
        client = fresh_client()
        global_adapter = init_adapter(RngStream(1, 0), 8, 8)
        cfg = TrainConfig(learning_rate=1e-3)
        round1 = local_train(client, global_adapter, cfg)
        round2 = local_train(round1, global_adapter, cfg)
        # Round 2 continues from round 1's residuals, not from zero.
        moved1 = {c: round1.residuals.deltas[c].copy() for c in round1.residuals.deltas}
        assert any(np.any(v != 0) for v in moved1.values())
        for c in moved1:
            assert not np.array_equal(round2.residuals.deltas[c], moved1[c])

    def test_single_round_residuals_independent_of_peers(self):
        # With one global round every client trains from the same broadcast
        # init, so a client's residuals cannot depend on anyone else's shard.
        cfg = TrainConfig(learning_rate=1e-3, local_epochs=2)
        global_adapter = init_adapter(RngStream(1, 0), 8, 8)
        out_a = local_train(fresh_client(seed=0), global_adapter, cfg)
        out_b = local_train(fresh_client(seed=0), global_adapter, cfg)
        for c in out_a.residuals.deltas:
            np.testing.assert_array_equal(out_a.residuals.deltas[c], out_b.residuals.deltas[c])

    def test_minibatch_mode_covers_shard(self):
        client = fresh_client()
        cfg = TrainConfig(learning_rate=1e-3, local_epochs=1, batch_size=5)
        out = local_train(client, init_adapter(RngStream(1, 0), 8, 8), cfg)
        # 12 samples at batch size 5 -> 3 batches per epoch
        assert len(out.loss_trace) == 3


class TestMakeUpdate:
    def test_untrained_state_exports_raw_prompts(self):
        client = fresh_client()
        out = local_train(client, init_adapter(RngStream(1, 0), 8, 8), TrainConfig(local_epochs=0))
        update = make_update(out)
        raw = {tuple(v) for v in client.prompt_embeddings.values()}
        assert {tuple(v) for v in update.perturbed_prompts} == raw

    def test_prompt_count_matches_class_count(self):
        client = fresh_client()
        out = local_train(client, init_adapter(RngStream(1, 0), 8, 8), TrainConfig())
        update = make_update(out)
        assert len(update.perturbed_prompts) == len(client.local_classes)

    def test_update_has_no_label_bearing_fields(self):
        fields = {f.name for f in dataclasses.fields(ClientUpdate)}
        assert fields == {"client_id", "adapter_weights", "perturbed_prompts"}

    def test_serialized_update_carries_no_class_names(self):
        client = fresh_client()
        out = local_train(client, init_adapter(RngStream(1, 0), 8, 8), TrainConfig())
        update = make_update(out)
        payload = json.dumps(
            {
                "client_id": update.client_id,
                "adapter": [m.tolist() for m in
                            (update.adapter_weights.w1, update.adapter_weights.b1,
                             update.adapter_weights.w2, update.adapter_weights.b2)],
                "prompts": [t.tolist() for t in update.perturbed_prompts],
            }
        )
        for name in client.local_classes:
            assert name not in payload

    def test_missing_adapter_rejected(self):
        client = fresh_client()
        with pytest.raises(ValueError):
            make_update(client)

    def test_prompt_set_round_trips_through_embedding_file(self, tmp_path):
        from fedovl.client import prompts_from_dataset, prompts_to_dataset
        from fedovl.fmeb import read_fmeb, write_fmeb

        client = fresh_client()
        out = local_train(client, init_adapter(RngStream(1, 0), 8, 8),
                          TrainConfig(learning_rate=1e-3))
        update = make_update(out)
        ds = prompts_to_dataset(update)
        write_fmeb(ds, tmp_path / "tprime.fmeb")
        back = prompts_from_dataset(read_fmeb(tmp_path / "tprime.fmeb"))
        assert len(back) == len(update.perturbed_prompts)
        for sent, received in zip(update.perturbed_prompts, back):
            np.testing.assert_array_equal(received, sent.astype(np.float32).astype(np.float64))
        # Nothing in the file names a class.
        raw = (tmp_path / "tprime.fmeb").read_bytes()
        for name in client.local_classes:
            assert name.encode() not in raw


class TestMakeClient:
    def test_prompts_must_cover_shard_labels(self):
        from fedovl.adapter import init_residuals

        shard, prompts = separable_shard()
        del prompts["left"]
        with pytest.raises(ValueError):
            ClientState(
                client_id=0,
                shard=shard,
                local_classes=sorted(prompts),
                prompt_embeddings=prompts,
                residuals=init_residuals(sorted(prompts), 8, 1.0),
            )
