"""
Test the hyperparameter search over dotted config keys.
"""

import pytest

from conformal_control.errors import ConfigError, ConformalControlError
from conformal_control.search import best_params, candidates, load_grid, search


class TestCandidates:

    def test_full_grid(self) -> None:
        points = candidates({'aci.eta': [0.01, 0.1], 'ncc.w': [5, 10, 20]})
        assert len(points) == 6
        assert {'aci.eta': 0.01, 'ncc.w': 20} in points

    def test_sampled_grid(self) -> None:
        grid = {'aci.eta': [0.01, 0.05, 0.1], 'ncc.w': [5, 10]}
        a, b = candidates(grid, n_iter=4, seed=1), candidates(grid, n_iter=4, seed=1)
        assert a == b and len(a) == 4
        assert len(candidates(grid, n_iter=100)) == 6
        with pytest.raises(ConfigError):
            candidates(grid, n_iter=0)

    def test_load_grid(self, tmp_path) -> None:
        path = tmp_path / 'grid.yml'
        path.write_text("aci.eta: [0.01, 0.1]\nncc.tta.mode: [mlp, vector]\n")
        assert load_grid(path) == {'aci.eta': [0.01, 0.1], 'ncc.tta.mode': ['mlp', 'vector']}

    @pytest.mark.parametrize("text", ["", "aci.eta: 0.1\n", "aci.eta: []\n", "- 1\n", "a: [unclosed\n"])
    def test_rejects_bad_grids(self, tmp_path, text) -> None:
        path = tmp_path / 'grid.yml'
        path.write_text(text)
        with pytest.raises(ConfigError):
            load_grid(path)

    def test_missing_grid_file(self, tmp_path) -> None:
        with pytest.raises(ConfigError):
            load_grid(tmp_path / 'absent.yml')


class TestSearch:

    def test_ranks_candidates_per_method(self, quick_config) -> None:
        config = quick_config.with_overrides({'methods': ['aci', 'nexcp'], 'seeds': [0]})
        table = search(config, {'aci.eta': [0.005, 0.1]})
        assert len(table) == 4
        for method, group in table.groupby('method'):
            assert list(group['rank']) == [1, 2]
            assert group['cs'].is_monotonic_increasing
        # nexcp ignores aci.eta, so both candidates tie and keep grid order
        nexcp = table[table['method'] == 'nexcp']
        assert list(nexcp['candidate']) == [0, 1]
        assert best_params(table, 'aci')['aci.eta'] in (0.005, 0.1)

    def test_invalid_candidates_are_skipped(self, quick_config) -> None:
        config = quick_config.with_overrides({'methods': ['aci'], 'seeds': [0]})
        table = search(config, {'split.warmup': [2, 60]})
        assert list(table['split.warmup']) == [60]

    def test_no_usable_candidate(self, quick_config) -> None:
        config = quick_config.with_overrides({'methods': ['aci'], 'seeds': [0]})
        with pytest.raises(ConformalControlError, match="No search candidate"):
            search(config, {'split.warmup': [1, 2]})

    def test_best_params_for_unknown_method(self, quick_config) -> None:
        config = quick_config.with_overrides({'methods': ['aci'], 'seeds': [0]})
        table = search(config, {'aci.eta': [0.05]})
        with pytest.raises(ConformalControlError):
            best_params(table, 'ncc')
