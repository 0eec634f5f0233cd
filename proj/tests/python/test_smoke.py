# Copyright 2026 The ditm Authors. All rights reserved.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#     http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

import math

import numpy as np
import pytest

import ditm


def test_render_is_deterministic_and_in_range():
    a = ditm.render("a large red square", seed=3)
    b = ditm.render("a large red square", seed=3)
    assert a.shape == (3, 32, 32)
    assert np.array_equal(a, b)
    assert a.min() >= -1.0 and a.max() <= 1.0
    gray = ditm.gray_image()
    assert np.all(gray == gray[0, 0, 0])


def test_fresh_model_scores_one_and_ranks_by_index():
    model = ditm.Model.init(width=4, seed=0)
    image = ditm.render("a small blue circle", seed=1)
    rec = model.score(image, "a small blue circle", bank_size=3, bank_seed=5)
    # A fresh model predicts zero noise, so the error is E[eps^2] over the bank.
    assert rec["conditional"] == rec["unconditional"]
    assert rec["normalized"] == 0.0
    assert rec["bank_id"] == "n=3,seed=5"
    assert abs(rec["conditional"] - 1.0) < 0.05
    out = model.text_retrieve(image, ["a small blue circle", "a small red circle"], bank_size=2)
    assert out["ranking"] == [0, 1]
    assert out["degenerate"]


def test_image_retrieval_records_share_the_bank(tmp_path):
    model = ditm.Model.init(width=4, seed=1)
    path = tmp_path / "m.ckpt"
    model.save(path)
    loaded = ditm.Model.load(path)
    assert loaded.width == 4
    images = [ditm.render(c, seed=2) for c in ("a small red square", "a small green square")]
    out = loaded.image_retrieve(images, "a small red square", normalized=False, bank_size=2)
    assert {r["bank_id"] for r in out["records"]} == {"n=2,seed=0"}
    with pytest.raises(ditm.DitmError):
        loaded.score(np.zeros((3, 16, 16)), "a small red square")


def test_statistics():
    p = ditm.class_posterior([0.0, math.log(2.0)])
    assert p[0] == pytest.approx(2 * p[1])
    assert ditm.rank_ascending([0.2, 0.1, 0.1]) == [1, 2, 0]
    acc, lo, hi = ditm.wilson_interval(81, 263)
    assert (round(lo, 4), round(hi, 4)) == (0.2553, 0.3662)
    r = ditm.permutation_test([6, 7, 8, 9, 10], [1, 2, 3, 4, 5])
    assert r["exact"] and r["p_value"] == pytest.approx(1 / 252)
    assert ditm.effect_size([1.0, 2.0], [3.0, 4.0]) == -ditm.effect_size([3.0, 4.0], [1.0, 2.0])


def test_cli_in_process(tmp_path):
    code, out, err = ditm.cli(["report", "--out", str(tmp_path)])
    assert code != 0 and "at least one" in err
    code, out, _ = ditm.cli(["--help"])
    assert code == 0 and "generate" in out
