from typing import Any, Callable, Dict, List

from langgraph.checkpoint.memory import MemorySaver
from langgraph.graph import END, StateGraph
from loguru import logger

from models.errors import EngineError
from models.schemas import RunConfig
from services.run_service import run_service
from services.storage_service import StorageService, storage_service
from utils.helpers import generate_run_id

# State is a plain dict of serialisable values (config as a dict, file lists, status)

STAGES: List[str] = ["fit", "decode", "predict", "changepoint", "report"]
STAGE_FUNCTIONS: Dict[str, Callable[[RunConfig, StorageService], Dict[str, Any]]] = {
    "fit": run_service.fit,
    "decode": run_service.decode,
    "predict": run_service.predict,
    "changepoint": run_service.changepoint,
    "report": run_service.report,
}


def _stage_node(stage: str):
    def node(state: Dict[str, Any]) -> Dict[str, Any]:
        try:
            logger.info(f"Pipeline {state['run_id']}: starting {stage}")
            cfg = RunConfig.model_validate(state["config"])
            result = STAGE_FUNCTIONS[stage](cfg, storage_service.for_output(cfg.output_dir))
            state["artifacts"] = state.get("artifacts", []) + [str(f) for f in result.get("files", [])]
            state["completed"] = state.get("completed", []) + [stage]
            state["status"] = f"{stage}_done"
            logger.info(f"Pipeline {state['run_id']}: {stage} finished")
            return state
        except EngineError as e:
            logger.error(f"Pipeline {state.get('run_id')}: {stage} failed: {e}")
            state["error"] = f"{stage} failed: {e}"
            state["error_code"] = e.code
            state["exit_code"] = e.exit_code
            state["status"] = "error"
            return state

    node.__name__ = f"{stage}_node"
    return node


def create_analysis_workflow() -> StateGraph:
    """Fit, decode, predict, change point and report, stopping at the first failed stage."""
    workflow = StateGraph(dict)
    for stage in STAGES:
        workflow.add_node(stage, _stage_node(stage))
    workflow.set_entry_point(STAGES[0])

    for stage, following in zip(STAGES[:-1], STAGES[1:]):
        workflow.add_conditional_edges(
            stage,
            lambda s, nxt=following: "end" if s.get("status") == "error" else nxt,
            {"end": END, following: following},
        )
    workflow.add_edge(STAGES[-1], END)
    return workflow


class AnalysisWorkflowManager:
    def __init__(self):
        self.workflow = create_analysis_workflow()
        self.memory = MemorySaver()
        self.app = self.workflow.compile(checkpointer=self.memory)

    def run(self, cfg: RunConfig) -> Dict[str, Any]:
        """
        Execute the full pipeline for one run configuration.

        Raises:
            EngineError: The failing stage's error, with its code and exit code
        """
        run_id = generate_run_id("pipeline")
        state: Dict[str, Any] = {
            "run_id": run_id,
            "config": cfg.model_dump(),
            "artifacts": [],
            "completed": [],
            "status": "pending",
            "error": "",
        }
        logger.info(f"Starting pipeline {run_id} in {cfg.output_dir}")
        result: Dict[str, Any] = self.app.invoke(state, {"configurable": {"thread_id": run_id}})

        if result.get("status") == "error":
            error = EngineError(result.get("error", "pipeline failed"), code=result.get("error_code"))
            error.exit_code = result.get("exit_code", 1)
            raise error
        logger.success(f"Pipeline {run_id} completed: {', '.join(result['completed'])}")
        return result

    def get_run_status(self, run_id: str) -> Dict[str, Any]:
        """Last checkpointed status of a pipeline run."""
        snapshot = self.app.get_state({"configurable": {"thread_id": run_id}})
        values = snapshot.values if snapshot else None
        if not values:
            return {"run_id": run_id, "status": "not_found", "error": "Run not found"}
        return {
            "run_id": run_id,
            "status": values.get("status", "unknown"),
            "completed": values.get("completed", []),
            "error": values.get("error", ""),
        }


# Global workflow manager instance
workflow_manager = AnalysisWorkflowManager()
