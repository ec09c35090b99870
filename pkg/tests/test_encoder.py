import os
import sys
import tempfile
import time
import unittest

import numpy as np
import torch

sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from bands import BandId, ChannelGroup, DYNAMIC_GROUPS, REAL_DYNAMIC_GROUPS, SPECTRAL_BANDS, GROUP_BANDS
from encoder.checkpoint import CheckpointError, checkpoint_paths, load_checkpoint, save_checkpoint
from encoder.model import PhenoEncoder, backward, embed_dataset, encode, load_encoder, save_encoder, tokenize
from encoder.normalization import default_spec, denormalize, normalize
from encoder.pretrain import PretrainConfig, mae_pretrain, mask_tokens
from encoder.tokens import (
    N_TOKENS, S1S2_GROUPS, TG_SLOT, TokenizationError, month_encoding, presence_mask, real_group_slots, series_batch,
)
from models import PixelTimeSeries
from synthetic import preset, synth_generate


def tiny_encoder(seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return PhenoEncoder(d_e=16, depth=1, heads=2, ff_width=32, feature_dim=8).to(dtype)


def native_series(seed=0, plot_id="P1"):
    rng = np.random.default_rng(seed)
    spectral = np.empty((12, 19))
    spectral[:, :2] = rng.uniform(-20.0, -5.0, (12, 2))
    spectral[:, 2:12] = rng.uniform(100.0, 5000.0, (12, 10))
    spectral[:, 12:] = rng.uniform(-1.0, 1.0, (12, 7))
    climate = np.stack([rng.uniform(0.0, 0.01, 12), rng.uniform(270.0, 295.0, 12)], axis=1)
    return PixelTimeSeries(plot_id=plot_id, spectral=spectral, climate=climate, dw=np.ones(12, dtype=np.int64),
                           elevation=float(rng.uniform(0, 100)), slope=float(rng.uniform(0, 10)),
                           lat=52.0, lon=5.0)


def drop_cells(series, cells, drop_tg=False):
    """Series with the given (month, group) cells set missing"""
    spectral = series.spectral.copy()
    climate = series.climate.copy()
    for month, group in cells:
        for band in GROUP_BANDS[group]:
            if band in SPECTRAL_BANDS:
                spectral[month, SPECTRAL_BANDS.index(band)] = np.nan
            else:
                climate[month, [BandId.TOTAL_PRECIPITATION, BandId.TEMPERATURE_2M].index(band)] = np.nan
    changes = {"spectral": spectral, "climate": climate}
    if drop_tg:
        changes["elevation"] = float("nan")
    return series.copy_with(**changes)


class TestNormalization(unittest.TestCase):
    def rule(self, band):
        return default_spec().rule_for(band)

    def test_endpoints(self):
        cases = [
            (BandId.VV, -31.0, -0.24), (BandId.VH, 17.0, 1.68), (BandId.VV, -25.0, 0.0),
            (BandId.B4, 15769.0, 1.5769), (BandId.B2, 0.0, 0.0),
            (BandId.TEMPERATURE_2M, 295.0, 0.653), (BandId.TEMPERATURE_2M, 278.0, 0.17),
            (BandId.TOTAL_PRECIPITATION, 0.0081, 0.27), (BandId.TOTAL_PRECIPITATION, 0.208, 6.93),
            (BandId.ELEVATION, -20.0, -0.01), (BandId.ELEVATION, 340.0, 0.17),
            (BandId.SLOPE, 0.0, 0.0), (BandId.SLOPE, 39.5, 0.79),
        ]
        for band, native, expected in cases:
            self.assertAlmostEqual(float(self.rule(band).apply(native)), expected, delta=0.01, msg=band)

    def test_indices_pass_through(self):
        self.assertIsNone(self.rule(BandId.NDVI))
        self.assertIsNone(self.rule(BandId.TCA))

    def test_inverse_and_monotone(self):
        series = native_series(1)
        back = denormalize(normalize(series))
        np.testing.assert_allclose(back.spectral, series.spectral, rtol=0, atol=1e-9)
        np.testing.assert_allclose(back.climate, series.climate, rtol=0, atol=1e-9)
        self.assertAlmostEqual(back.elevation, series.elevation, delta=1e-9)
        for band in (BandId.VV, BandId.B8, BandId.TEMPERATURE_2M, BandId.SLOPE):
            x = np.linspace(-50.0, 500.0, 100)
            self.assertTrue(np.all(np.diff(self.rule(band).apply(x)) > 0))

    def test_missing_stays_missing(self):
        series = drop_cells(native_series(), [(3, ChannelGroup.S1)])
        self.assertTrue(np.isnan(normalize(series).band(BandId.VV)[3]))


class TestTokens(unittest.TestCase):
    def test_month_encoding(self):
        zero = month_encoding(0, 8)
        self.assertAlmostEqual(zero[0], 0.0)
        self.assertAlmostEqual(zero[1], 1.0)
        three = month_encoding(3, 8)
        self.assertAlmostEqual(three[0], 1.0)
        self.assertAlmostEqual(three[1], 0.0, places=12)
        np.testing.assert_allclose(month_encoding(6, 8), -zero, atol=1e-12)
        with self.assertRaises(ValueError):
            month_encoding(12, 8)

    def test_full_series_has_110_tokens(self):
        tokens = tokenize(native_series(), tiny_encoder())
        self.assertEqual(len(tokens), 110)
        self.assertEqual(N_TOKENS, 110)

    def test_era5_absent_gives_98_tokens(self):
        series = drop_cells(native_series(), [(m, ChannelGroup.ERA5) for m in range(12)])
        self.assertEqual(len(tokenize(series, tiny_encoder())), 98)

    def test_token_count_over_random_presence(self):
        rng = np.random.default_rng(7)
        base = native_series()
        start = time.perf_counter()
        for _ in range(500):
            dropped_groups = [g for g in REAL_DYNAMIC_GROUPS if rng.random() < 0.3]
            drop_tg = bool(rng.random() < 0.5)
            series = drop_cells(base, [(m, g) for g in dropped_groups for m in range(12)], drop_tg)
            expected = 12 * (9 - len(dropped_groups)) + (1 if drop_tg else 2)
            self.assertEqual(int(presence_mask(series).sum()), expected)
        self.assertLess(time.perf_counter() - start, 5.0)

    def test_token_count_with_scattered_gaps(self):
        rng = np.random.default_rng(8)
        encoder = tiny_encoder()
        for _ in range(20):
            cells = {(int(m), REAL_DYNAMIC_GROUPS[int(g)])
                     for m, g in zip(rng.integers(0, 12, 10), rng.integers(0, len(REAL_DYNAMIC_GROUPS), 10))}
            series = drop_cells(native_series(), cells)
            self.assertEqual(len(tokenize(series, encoder)), 110 - len(cells))

    def test_dw_token_is_table_row_plus_encoding(self):
        encoder = tiny_encoder()
        tokens = tokenize(native_series(), encoder)
        dw_index = DYNAMIC_GROUPS.index(ChannelGroup.DW)
        slot = 4 * len(DYNAMIC_GROUPS) + dw_index
        row = tokens.slots.index(slot)
        expected = encoder.dw_embedding.weight[1] + encoder.slot_encodings()[slot]
        torch.testing.assert_close(tokens.embeddings[row], expected)
        self.assertEqual(tokens.tokens[row].group, ChannelGroup.DW)
        self.assertEqual(tokens.tokens[row].month, 4)

    def test_static_token_encodings(self):
        encoder = tiny_encoder()
        encodings = encoder.slot_encodings()
        # TG keeps only its channel part; Loc carries nothing
        self.assertTrue(torch.all(encodings[TG_SLOT, encoder.channel_dim:] == 0))
        self.assertTrue(torch.all(encodings[TG_SLOT + 1] == 0))

    def test_s1s2_inputs_drop_other_groups(self):
        mask = presence_mask(native_series(), "s1s2")
        self.assertEqual(int(mask.sum()), 72)

    def test_real_group_slots(self):
        slots = real_group_slots()
        self.assertEqual(len(slots), 12 * len(REAL_DYNAMIC_GROUPS))
        dw_index = DYNAMIC_GROUPS.index(ChannelGroup.DW)
        self.assertFalse(any(s % len(DYNAMIC_GROUPS) == dw_index for s in slots))
        self.assertLess(max(slots), TG_SLOT)

    def test_pixel_without_tokens(self):
        series = drop_cells(native_series(), [(m, g) for g in S1S2_GROUPS for m in range(12)])
        with self.assertRaises(TokenizationError):
            series_batch([series], deep_inputs="s1s2")


class TestEncode(unittest.TestCase):
    def test_output_width(self):
        encoder = PhenoEncoder()
        feature = encode(tokenize(native_series(), encoder), encoder)
        self.assertEqual(len(feature.values), 128)
        self.assertEqual(feature.names[0], "deep_000")

    def test_permutation_invariance(self):
        encoder = tiny_encoder()
        encoder.train()
        tokens = tokenize(native_series(), encoder)
        order = np.random.default_rng(0).permutation(len(tokens))
        a = encode(tokens, encoder).values
        b = encode(tokens.permuted(order), encoder).values
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_duplication_invariance(self):
        encoder = tiny_encoder()
        encoder.train()
        tokens = tokenize(native_series(), encoder)
        doubled = tokens.model_copy(update={
            "embeddings": torch.cat([tokens.embeddings, tokens.embeddings]),
            "slots": tokens.slots + tokens.slots,
        })
        np.testing.assert_allclose(encode(tokens, encoder).values, encode(doubled, encoder).values, atol=1e-6)

    def test_batched_matches_single(self):
        encoder = tiny_encoder()
        encoder.train()
        series = [native_series(0), drop_cells(native_series(1), [(2, ChannelGroup.S1), (5, ChannelGroup.NDVI)])]
        batched = embed_dataset(series, encoder)
        encoder.train()
        for i, s in enumerate(series):
            np.testing.assert_allclose(batched[i], encode(tokenize(s, encoder), encoder).values, atol=1e-6)

    def test_deterministic(self):
        encoder = tiny_encoder()
        tokens = tokenize(native_series(), encoder)
        np.testing.assert_array_equal(encode(tokens, encoder).values, encode(tokens, encoder).values)


class TestBackward(unittest.TestCase):
    def objective(self, encoder, series, upstream):
        with torch.no_grad():
            tokens = tokenize(series, encoder)
            return float(upstream @ encoder.pool(encoder.encode_tokens(tokens.embeddings.unsqueeze(0)))[0])

    def test_matches_finite_differences(self):
        encoder = tiny_encoder(3)
        encoder.train()
        series = drop_cells(native_series(2), [(1, ChannelGroup.S2_SWIR)])
        upstream = torch.as_tensor(np.random.default_rng(4).normal(0, 1, 8))
        grads = backward(tokenize(series, encoder), encoder, upstream)
        params = dict(encoder.named_parameters())
        self.assertEqual(set(grads), set(params))

        rng = np.random.default_rng(5)
        h = 1e-5
        for name, param in params.items():
            flat = param.data.view(-1)
            picks = rng.choice(flat.numel(), size=min(8, flat.numel()), replace=False)
            for k in picks:
                original = float(flat[k])
                flat[k] = original + h
                plus = self.objective(encoder, series, upstream)
                flat[k] = original - h
                minus = self.objective(encoder, series, upstream)
                flat[k] = original
                numeric = (plus - minus) / (2 * h)
                analytic = float(grads[name].view(-1)[k])
                self.assertLessEqual(abs(analytic - numeric),
                                     1e-4 * max(abs(analytic), abs(numeric)) + 1e-7,
                                     msg=f"{name}[{k}]: {analytic} vs {numeric}")

    def test_zero_upstream(self):
        encoder = tiny_encoder()
        grads = backward(tokenize(native_series(), encoder), encoder, torch.zeros(8, dtype=torch.float64))
        for grad in grads.values():
            self.assertTrue(torch.all(grad == 0))

    def test_upstream_shape_checked(self):
        encoder = tiny_encoder()
        with self.assertRaises(ValueError):
            backward(tokenize(native_series(), encoder), encoder, torch.zeros(3, dtype=torch.float64))


class TestCheckpoint(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def test_encoder_round_trip_is_bit_exact(self):
        torch.manual_seed(0)
        encoder = PhenoEncoder(d_e=24, depth=1, heads=4, ff_width=48, feature_dim=16)
        base = save_encoder(encoder, os.path.join(self.tmp.name, "enc"), seed=0)
        loaded, meta = load_encoder(base)
        self.assertEqual(meta["d_e"], 24)
        self.assertEqual(meta["seed"], 0)
        self.assertEqual(meta["normalization_version"], 1)
        original = encoder.state_dict()
        for name, tensor in loaded.state_dict().items():
            self.assertTrue(torch.equal(tensor, original[name]), name)
        series = native_series()
        np.testing.assert_array_equal(embed_dataset([series], encoder), embed_dataset([series], loaded))

    def test_manifest_lists_offsets_and_shapes(self):
        state = {"a": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": torch.tensor(1.5)}
        base = save_checkpoint(state, os.path.join(self.tmp.name, "ck"), {"kind": "test", "depth": 2})
        blob, manifest = checkpoint_paths(base)
        text = manifest.read_text()
        self.assertIn("a 0 2x3 <f4", text)
        self.assertIn("b 24 scalar <f4", text)
        self.assertEqual(blob.stat().st_size, 28)
        meta, loaded = load_checkpoint(base)
        self.assertEqual(meta["depth"], 2)
        self.assertTrue(torch.equal(loaded["a"], state["a"]))

    def test_meta_values_keep_their_types(self):
        meta = {"kind": "test", "names": ["a, b", "c"], "lr": 0.001, "flag": True, "none": None, "tag": "x=y"}
        base = save_checkpoint({"a": torch.ones(2)}, os.path.join(self.tmp.name, "ck"), meta)
        loaded, _ = load_checkpoint(base)
        self.assertEqual(loaded, meta)

    def test_float32_encoder_writes_only_f4(self):
        torch.manual_seed(0)
        encoder = PhenoEncoder(d_e=16, depth=1, heads=2, ff_width=32, feature_dim=8)
        base = save_encoder(encoder, os.path.join(self.tmp.name, "enc"), seed=0)
        _, manifest = checkpoint_paths(base)
        params = manifest.read_text().split("[params]")[1].strip().splitlines()[1:]
        self.assertTrue(params)
        self.assertTrue(all(line.endswith("<f4") for line in params))


    def test_truncated_blob(self):
        base = save_checkpoint({"a": torch.ones(4)}, os.path.join(self.tmp.name, "ck"), {"kind": "test"})
        blob, _ = checkpoint_paths(base)
        blob.write_bytes(blob.read_bytes()[:8])
        with self.assertRaises(CheckpointError):
            load_checkpoint(base)

    def test_missing_files(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(os.path.join(self.tmp.name, "absent"))


def small_synthetic(per_class=30, seed=0):
    config = preset("simb")
    config = config.model_copy(update={"classes": [c.model_copy(update={"count": per_class})
                                                   for c in config.classes]})
    return synth_generate(config, seed)


class TestPretrain(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.series = small_synthetic(per_class=29).series[:200]

    def toy(self, seed=0):
        torch.manual_seed(seed)
        return PhenoEncoder(d_e=16, depth=1, heads=2, ff_width=32, feature_dim=8)

    def test_loss_decreases(self):
        config = PretrainConfig(epochs=20, batch_size=50, lr=3e-3, seed=0)
        start = time.perf_counter()
        result = mae_pretrain(self.series, self.toy(), config)
        self.assertEqual(len(result.losses), 20)
        self.assertLess(result.losses[-1], result.losses[0])
        self.assertLess(time.perf_counter() - start, 120.0)

    def test_same_seed_same_trace(self):
        config = PretrainConfig(epochs=3, batch_size=50, seed=4)
        a = mae_pretrain(self.series, self.toy(1), config).losses
        b = mae_pretrain(self.series, self.toy(1), config).losses
        self.assertEqual(a, b)

    def test_ratio_zero_rejected(self):
        with self.assertRaises(ValueError):
            mae_pretrain(self.series, self.toy(), PretrainConfig(mask_ratio=0.0, epochs=1))

    def test_strategies_mask_only_real_dynamic_slots(self):
        present = series_batch(self.series[:16]).mask
        for strategy in ("random", "group", "month"):
            generator = torch.Generator().manual_seed(0)
            masked = mask_tokens(present, 0.75, strategy, generator)
            self.assertFalse((masked & ~present).any())
            self.assertFalse(masked[:, TG_SLOT:].any())
            dw = [s for s in range(TG_SLOT) if s % len(DYNAMIC_GROUPS) == DYNAMIC_GROUPS.index(ChannelGroup.DW)]
            self.assertFalse(masked[:, dw].any())
            self.assertTrue((present & ~masked).any(dim=1).all())

    def test_random_ratio(self):
        present = series_batch(self.series[:8]).mask
        masked = mask_tokens(present, 0.75, "random", torch.Generator().manual_seed(1))
        real = present.clone()
        real[:, TG_SLOT:] = False
        dw_index = DYNAMIC_GROUPS.index(ChannelGroup.DW)
        real[:, dw_index:TG_SLOT:len(DYNAMIC_GROUPS)] = False
        expected = torch.floor(real.sum(dim=1) * 0.75 + 0.5)
        self.assertTrue(torch.equal(masked.sum(dim=1).double(), expected.double()))


if __name__ == "__main__":
    unittest.main()
