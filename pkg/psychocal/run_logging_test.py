import logging

from psychocal.run_logging import configure_logging, setup_log


def test_setup_log_writes_header(tmp_path):
    path = setup_log(tmp_path / "logs", "fit-irt")
    assert path.parent == tmp_path / "logs"
    assert path.name.startswith("fit-irt_") and path.suffix == ".log"
    assert path.read_text(encoding="utf-8").startswith("Command: fit-irt\n")


def test_configure_logging_level_from_environment(tmp_path, monkeypatch):
    path = setup_log(tmp_path, "evaluate")
    monkeypatch.setenv("PSYCHOCAL_LOG", "debug")
    configure_logging(path)
    logger = logging.getLogger("psychocal.metrics")
    assert logging.getLogger("psychocal").level == logging.DEBUG
    logger.debug("hello from the test")
    for handler in logging.getLogger("psychocal").handlers:
        handler.flush()
    assert "hello from the test" in path.read_text(encoding="utf-8")

    monkeypatch.setenv("PSYCHOCAL_LOG", "not-a-level")
    configure_logging()
    assert logging.getLogger("psychocal").level == logging.INFO
    assert len(logging.getLogger("psychocal").handlers) == 1
