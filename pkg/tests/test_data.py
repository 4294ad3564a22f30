import json
import math

import numpy as np
import pytest

from storydiff.data import (RawEpisode, SynthSpec, dedup_frames,
                            default_vocab, dtw_align, erase_regions,
                            load_episode, make_recon_pair, parse_description,
                            prepare_episode, protagonist_mask, synth_stories)
from storydiff.metrics import toy_embed
from storydiff.stories import load_corpus, save_corpus, save_image


class TestSynthStories:
    def test_same_seed_identical_corpora(self):
        spec = SynthSpec(n_stories=5, seed=9)
        a = synth_stories(spec)
        b = synth_stories(spec)
        for sa, sb in zip(a, b):
            assert sa.frames[0].caption == sb.frames[0].caption
            for fa, fb in zip(sa.frames, sb.frames):
                assert np.array_equal(fa.image, fb.image)

    def test_protagonist_fixed_scene_varies(self, small_corpus):
        for story in small_corpus:
            descs = [parse_description(f.caption) for f in story.frames]
            first = descs[0]
            assert all(d["color"] == first["color"] and d["shape"] == first["shape"]
                       and d["texture"] == first["texture"] for d in descs)
            scenes = [d["scene"] for d in descs]
            assert all(a != b for a, b in zip(scenes, scenes[1:]))

    def test_frame_count(self):
        stories = synth_stories(SynthSpec(n_stories=10, min_frames=5, max_frames=5))
        assert sum(len(s) for s in stories) == 50

    def test_protagonist_pixels_identical_up_to_translation(self, small_corpus):
        # align each frame's saturated region by its bounding box; the mask
        # pattern and the pixels under it must agree exactly across the story
        for story in small_corpus:
            crops = []
            for frame in story.frames:
                mask = protagonist_mask(frame.image)
                rows = np.nonzero(mask.any(axis=1))[0]
                cols = np.nonzero(mask.any(axis=0))[0]
                box = (slice(rows.min(), rows.max() + 1),
                       slice(cols.min(), cols.max() + 1))
                crops.append((mask[box], frame.image[(slice(None),) + box]))
            mask0, img0 = crops[0]
            for mask, img in crops[1:]:
                assert np.array_equal(mask, mask0)
                assert np.array_equal(img[:, mask], img0[:, mask0])

    def test_narration_drops_color_and_stays_in_vocab(self, small_corpus):
        vocab = set(default_vocab())
        for story in small_corpus:
            for frame in story.frames:
                assert set(frame.caption.split()) <= vocab
                assert set(frame.narration.split()) <= vocab
                color = parse_description(frame.caption)["color"]
                assert color is not None
                assert color not in frame.narration.split()

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            SynthSpec(n_stories=0)
        with pytest.raises(ValueError):
            SynthSpec(n_stories=1, min_frames=5, max_frames=4)


class TestCorpusIO:
    def test_roundtrip(self, small_corpus, tmp_path):
        save_corpus(small_corpus[:3], tmp_path, splits=["train", "train", "test"])
        loaded = load_corpus(tmp_path)
        assert len(loaded) == 3
        assert load_corpus(tmp_path, split="test")[0].frames[0].caption == \
            small_corpus[2].frames[0].caption
        # 8-bit quantization bounds the roundtrip error
        orig = small_corpus[0].frames[0].image
        assert np.max(np.abs(loaded[0].frames[0].image - orig)) <= 1 / 127.5

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_corpus(tmp_path)


class TestDedup:
    def test_all_similar_single_survivor(self):
        v = np.array([1.0, 0.0])
        feats = np.stack([v, v, v])
        assert dedup_frames(feats, 0.9) == [0]

    def test_orthogonal_all_kept(self):
        assert dedup_frames(np.eye(4), 0.9) == [0, 1, 2, 3]

    def test_chained_components(self):
        # angles 0/20/40 degrees chain together at tau=0.9 (cos20 ~ 0.94,
        # cos40 ~ 0.77 merges transitively); two more nearly opposite
        def unit(deg):
            return np.array([math.cos(math.radians(deg)), math.sin(math.radians(deg)), 0.0])
        feats = np.stack([unit(0), unit(20), unit(40),
                          np.array([0.0, 0.0, 1.0]),
                          np.array([math.sin(math.radians(10)), 0.0,
                                    math.cos(math.radians(10))])])
        assert dedup_frames(feats, 0.9) == [0, 3]

    def test_idempotent(self, nprng):
        feats = nprng.normal(size=(40, 8))
        feats /= np.linalg.norm(feats, axis=1, keepdims=True)
        keep = dedup_frames(feats, 0.8)
        again = dedup_frames(feats[keep], 0.8)
        assert again == list(range(len(keep)))

    def test_rejects_unnormalized(self):
        with pytest.raises(ValueError, match="unit-norm"):
            dedup_frames(np.array([[1.0, 1.0]]), 0.9)

    def test_rejects_bad_threshold(self):
        with pytest.raises(ValueError):
            dedup_frames(np.eye(2), 1.5)


class TestDtwAlign:
    def test_identical_sequences_diagonal(self):
        times = [1.0, 2.0, 3.0]
        subs = [(0.5, 1.5), (1.5, 2.5), (2.5, 3.5)]
        path = dtw_align(times, subs)
        assert path == [(0, 0), (1, 1), (2, 2)]
        assert sum(abs(times[i] - (subs[j][0] + subs[j][1]) / 2) for i, j in path) == 0.0

    def test_single_frame_pairs_with_all(self):
        path = dtw_align([2.0], [(0.0, 1.0), (1.0, 2.0), (2.0, 5.0)])
        assert path == [(0, 0), (0, 1), (0, 2)]

    def test_worked_example_matches_enumeration(self):
        # all monotone paths enumerated by hand for 3 frames x 2 subtitles:
        # optimum pairs the middle frame with either subtitle at equal cost
        times = [1.0, 5.0, 9.0]
        subs = [(0.7, 1.7), (8.3, 9.3)]
        path = dtw_align(times, subs)
        cost = sum(abs(times[i] - (s + e) / 2) for i, (s, e) in
                   ((i, subs[j]) for i, j in path))
        assert path == [(0, 0), (1, 0), (2, 1)]
        assert cost == pytest.approx(0.2 + 3.8 + 0.2)

    def test_monotone_and_endpoints(self, nprng):
        for _ in range(50):
            n, m = int(nprng.integers(1, 7)), int(nprng.integers(1, 7))
            times = np.sort(nprng.uniform(0, 10, n)).tolist()
            mids = np.sort(nprng.uniform(0, 10, m))
            subs = [(v - 0.1, v + 0.1) for v in mids]
            path = dtw_align(times, subs)
            assert path[0] == (0, 0) and path[-1] == (n - 1, m - 1)
            steps = {(b[0] - a[0], b[1] - a[1]) for a, b in zip(path, path[1:])}
            assert steps <= {(1, 0), (0, 1), (1, 1)}

    def test_rejects_empty_and_unsorted(self):
        with pytest.raises(ValueError):
            dtw_align([], [(0, 1)])
        with pytest.raises(ValueError):
            dtw_align([2.0, 1.0], [(0, 1)])


class TestEraseRegions:
    def _image(self):
        rng = np.random.default_rng(0)
        return rng.uniform(-1, 1, size=(3, 12, 12)).astype(np.float32)

    def test_no_boxes_unchanged(self):
        img = self._image()
        assert np.array_equal(erase_regions(img, []), img)

    def test_full_image_mean_fill(self):
        img = self._image()
        out = erase_regions(img, [(0, 0, 12, 12)], "mean_fill")
        for c in range(3):
            assert np.allclose(out[c], img[c].mean(), atol=1e-6)

    def test_outside_pixels_bit_identical(self):
        img = self._image()
        for mode in ("mean_fill", "border_blend"):
            out = erase_regions(img, [(0, 0, 6, 6)], mode)
            assert np.array_equal(out[:, 6:, :], img[:, 6:, :])
            assert np.array_equal(out[:, :6, 6:], img[:, :6, 6:])
            assert not np.array_equal(out[:, :6, :6], img[:, :6, :6])

    def test_border_blend_interpolates_between_edges(self):
        img = np.zeros((1, 4, 8), dtype=np.float64)
        img[0, :, 0] = 1.0   # left neighbour column of the box
        out = erase_regions(img, [(0, 1, 4, 7)], "border_blend")
        # rows are identical; values fall off linearly from left to right
        row = out[0, 1, 1:7]
        assert np.all(np.diff(row) < 0)

    def test_rejects_out_of_bounds_and_bad_mode(self):
        img = self._image()
        with pytest.raises(ValueError):
            erase_regions(img, [(0, 0, 13, 4)])
        with pytest.raises(ValueError):
            erase_regions(img, [(0, 0, 2, 2)], mode="blur")


class TestMakeReconPair:
    def _image_and_mask(self):
        img = np.full((3, 10, 10), -0.5, dtype=np.float32)
        img[:, 2:6, 3:7] = 0.8
        mask = np.zeros((10, 10), dtype=bool)
        mask[2:6, 3:7] = True
        return img, mask

    def test_identity_augmentation_whole_image(self, nprng):
        img = np.random.default_rng(1).uniform(-1, 1, (3, 8, 8)).astype(np.float32)
        mask = np.ones((8, 8), dtype=bool)
        pair = make_recon_pair(img, [(mask, "thing")], nprng, ["a caption"],
                               max_shift=0, rotations=(0,))
        assert len(pair.references) == 1
        assert np.array_equal(pair.references[0], img)
        assert np.array_equal(pair.target, img)
        assert pair.reference_text == "thing"
        assert pair.prompt == "a caption"

    def test_multi_variant_emits_one_reference_per_object(self, nprng):
        img, mask = self._image_and_mask()
        m2 = np.zeros_like(mask)
        m2[7:9, 0:2] = True
        pair = make_recon_pair(img, [(mask, "square"), (m2, "chip")], nprng,
                               ["cap"], variant="multi")
        assert len(pair.references) == 2

    def test_fixed_rng_reproducible(self):
        img, mask = self._image_and_mask()
        a = make_recon_pair(img, [(mask, "square")], np.random.default_rng(5), ["c"])
        b = make_recon_pair(img, [(mask, "square")], np.random.default_rng(5), ["c"])
        assert np.array_equal(a.references[0], b.references[0])

    def test_rejects_overlapping_and_empty(self, nprng):
        img, mask = self._image_and_mask()
        with pytest.raises(ValueError):
            make_recon_pair(img, [], nprng, ["c"])
        with pytest.raises(ValueError):
            make_recon_pair(img, [(mask, "a"), (mask, "b")], nprng, ["c"])
        with pytest.raises(ValueError):
            make_recon_pair(img, [(mask, "a")], nprng, [])


class TestEpisodePipeline:
    def _write_episode(self, tmp_path, small_corpus):
        frames = [small_corpus[0].frames[0].image,
                  small_corpus[0].frames[0].image,   # exact duplicate
                  small_corpus[1].frames[0].image]
        files = []
        for i, img in enumerate(frames):
            name = f"f{i}.png"
            save_image(tmp_path / name, img)
            files.append(name)
        manifest = {
            "frames": [{"file": f, "t": float(2 * i)} for i, f in enumerate(files)],
            "subtitles": [{"text": "first words", "start": 0.0, "end": 1.0},
                          {"text": "later words", "start": 3.5, "end": 4.5}],
        }
        path = tmp_path / "episode.json"
        path.write_text(json.dumps(manifest))
        return path

    def test_prepare_dedups_and_aligns(self, tmp_path, small_corpus):
        path = self._write_episode(tmp_path, small_corpus)
        episode = load_episode(path)
        story = prepare_episode(episode, tmp_path, toy_embed, dedup_threshold=0.999)
        assert len(story) == 2          # duplicate removed
        assert story.frames[0].caption == "first words"
        assert story.frames[1].caption == "later words"

    def test_episode_validation(self):
        with pytest.raises(ValueError):
            RawEpisode(frames=(("a.png", 2.0), ("b.png", 1.0)), subtitles=())
        with pytest.raises(ValueError):
            RawEpisode(frames=(("a.png", 1.0),),
                       subtitles=(("text", 2.0, 1.0),))
