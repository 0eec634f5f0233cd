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

"""Diffusion image-text matching on procedurally rendered scenes."""

from ._core import (
    DitmError,
    Model,
    class_posterior,
    cli,
    effect_size,
    gray_image,
    permutation_test,
    rank_ascending,
    render,
    wilson_interval,
)

__all__ = [
    "DitmError",
    "Model",
    "class_posterior",
    "cli",
    "effect_size",
    "gray_image",
    "permutation_test",
    "rank_ascending",
    "render",
    "wilson_interval",
]
