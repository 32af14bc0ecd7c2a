import json

import numpy as np
import pytest

from cifbm.boltzmann import BmModel
from cifbm.cli import main


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture
def data_csv(tmp_path):
    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, (120, 4))
    x[:, 1] = np.where(rng.random(120) < 0.9, x[:, 0], 1 - x[:, 0])
    p = tmp_path / "data.csv"
    p.write_text("a,b,c,d\n" + "\n".join(",".join(map(str, r)) for r in x) + "\n")
    return str(p)


def test_fid_table(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"n_vars": [3, 4], "replicates": 2})
    out = tmp_path / "out"
    assert main(["fid-table", "--config", cfg, "--seed", "5", "--out", str(out)]) == 0
    assert (out / "table1.csv").read_text().startswith("n,replicate,param_ratio,fid_ratio")
    assert set(json.loads((out / "table1_summary.json").read_text())) == {"3", "4"}
    assert (out / "records.csv").exists() and (out / "records_summary.json").exists()


def test_vbm_density(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"n_vars": 4, "sample_sizes": [50], "methods": ["full"]})
    assert main(["vbm-density", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "records.csv").read_text().count("\n") == 4


def test_vrbm_density(tmp_path):
    cfg = write_json(tmp_path / "c.json", {"n_vars": 4, "n_hidden": 2, "sample_sizes": [50],
                                           "methods": ["rbm_baseline"], "train_cfg": {"max_epochs": 30}})
    assert main(["vrbm-density", "--config", cfg, "--out", str(tmp_path / "o")]) == 0


def test_select_htest_and_cv(tmp_path, data_csv):
    cfg = write_json(tmp_path / "c.json", {"data": data_csv})
    assert main(["select", "--config", cfg, "--out", str(tmp_path / "h")]) == 0
    rows = (tmp_path / "h" / "edges.csv").read_text().splitlines()
    assert rows[0] == "i,j,rho,p_value,selected" and rows[1].startswith("1,2,") and rows[1].endswith(",1")
    cfg = write_json(tmp_path / "c2.json", {"data": data_csv, "method": "cif_cv", "grid": [0, 1, 6]})
    assert main(["select", "--config", cfg, "--out", str(tmp_path / "cv")]) == 0
    assert (tmp_path / "cv" / "cv_table.csv").read_text().startswith("budget,fold,score")
    assert (tmp_path / "cv" / "edges.csv").read_text().splitlines()[1] == "1,2,0,1"


def test_train_and_eval_hamming(tmp_path, data_csv):
    cfg = write_json(tmp_path / "c.json", {"data": data_csv, "edges": [[1, 2]]})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "m")]) == 0
    model = BmModel.from_json((tmp_path / "m" / "model.json").read_text())
    assert model.mask_U.sum() == 2
    assert (tmp_path / "m" / "trace.csv").read_text().startswith("epoch,grad_norm,kl_to_data")
    cfg = write_json(tmp_path / "h.json", {"data": data_csv, "model": str(tmp_path / "m" / "model.json"),
                                           "burn_in": 20, "thin": 2})
    assert main(["eval-hamming", "--config", cfg, "--out", str(tmp_path / "e")]) == 0
    d = json.loads((tmp_path / "e" / "hamming.json").read_text())
    assert 0 <= d["d_ham"] <= 4 and d["rows"] == 120


def test_config_errors_exit_2(tmp_path, data_csv):
    missing = str(tmp_path / "none.json")
    assert main(["fid-table", "--config", missing]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["vbm-density", "--config", write_json(tmp_path / "k.json", {"colour": 1})]) == 2
    assert main(["vbm-density", "--config", write_json(tmp_path / "r.json", {"replicates": 0})]) == 2
    assert main(["fid-table", "--config", write_json(tmp_path / "e.json", {"experiment": "vbm_density"})]) == 2
    assert main(["select", "--config", write_json(tmp_path / "s.json", {"data": data_csv, "alpha": 2})]) == 2
    assert main(["select", "--config", write_json(tmp_path / "m.json", {"method": "cif_htest"})]) == 2


def test_parse_error_exit_2(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("0,1\n1,7\n")
    assert main(["train", "--config", write_json(tmp_path / "c.json", {"data": str(p)})]) == 2


def test_non_convergence_exit_3(tmp_path, data_csv):
    cfg = write_json(tmp_path / "c.json", {"data": data_csv, "train_cfg": {"max_epochs": 1, "tol": 1e-14}})
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "m")]) == 3
    assert (tmp_path / "m" / "model.json").exists()
