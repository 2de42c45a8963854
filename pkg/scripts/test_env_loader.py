import os

from env_loader import load_env


def test_env_file_fills_missing_values(tmp_path, monkeypatch):
    env = tmp_path / ".env"
    env.write_text("REFPOINT_SEED=11\nREFPOINT_TEST_ONLY=yes\n")
    monkeypatch.delenv("REFPOINT_SEED", raising=False)
    monkeypatch.delenv("REFPOINT_TEST_ONLY", raising=False)
    assert load_env(str(env)) == str(env)
    assert os.environ["REFPOINT_SEED"] == "11"
    assert os.environ["REFPOINT_TEST_ONLY"] == "yes"
    monkeypatch.delenv("REFPOINT_TEST_ONLY")


def test_process_environment_wins_over_the_file(tmp_path, monkeypatch):
    env = tmp_path / ".env"
    env.write_text("REFPOINT_SEED=11\n")
    monkeypatch.setenv("REFPOINT_SEED", "3")
    load_env(str(env))
    assert os.environ["REFPOINT_SEED"] == "3"


def test_missing_file_is_not_an_error(tmp_path):
    assert load_env(str(tmp_path / "none.env")) is None
