import pytest

from models.errors import EngineError
from models.schemas import RunConfig
from services.run_service import run_service
from workflows.analysis_workflow import STAGE_FUNCTIONS, STAGES, AnalysisWorkflowManager


@pytest.fixture
def manager():
    return AnalysisWorkflowManager()


def test_first_failure_stops_pipeline(manager, tmp_path):
    cfg = RunConfig(output_dir=str(tmp_path))
    with pytest.raises(EngineError) as excinfo:
        manager.run(cfg)
    assert excinfo.value.code == "MISSING_PATH"
    assert excinfo.value.exit_code == 2


def test_status_is_checkpointed(manager, tmp_path):
    state = {
        "run_id": "pipeline_test",
        "config": RunConfig(output_dir=str(tmp_path)).model_dump(),
        "artifacts": [],
        "completed": [],
        "status": "pending",
        "error": "",
    }
    manager.app.invoke(state, {"configurable": {"thread_id": "pipeline_test"}})
    status = manager.get_run_status("pipeline_test")
    assert status["status"] == "error"
    assert status["completed"] == []
    assert status["error"].startswith("fit failed")


def test_unknown_run(manager):
    assert manager.get_run_status("nope")["status"] == "not_found"


def test_stage_order():
    assert STAGES == ["fit", "decode", "predict", "changepoint", "report"]


def test_stages_run_through_run_service():
    for stage in STAGES:
        assert STAGE_FUNCTIONS[stage] == getattr(run_service, stage)
