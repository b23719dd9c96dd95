# src/lane_resim/api/router.py
import logging
from dataclasses import asdict
from typing import Union

from fastapi import APIRouter, BackgroundTasks, HTTPException
from fastapi.concurrency import run_in_threadpool

from ..schemas import tasks as task_schemas
from ..schemas.experiment import load_experiment_config
from ..services import experiment, task_manager

router = APIRouter(prefix="/api/v1")


@router.get("/tasks/{task_id}",
            response_model=task_schemas.TaskStatusResponse,
            tags=["Task Management"],
            summary="查询异步任务的状态")
def get_task_status(task_id: str):
    """根据任务ID获取任务的当前状态、结果或错误。"""
    task = task_manager.get_task(task_id)
    if not task:
        raise HTTPException(status_code=404, detail="任务ID不存在或已过期")

    status = task['status']
    response_data = {"task_id": task_id, "status": status, "result": task.get('result')}
    if status == task_manager.TaskStatus.FAILED:
        response_data['result'] = {"error": task.get('error') or '未知错误'}
    if status in (task_manager.TaskStatus.COMPLETED, task_manager.TaskStatus.FAILED):
        # 结束的任务缓存一段时间后再清理
        task_manager.schedule_task_cleanup(task_id)
    return response_data


def perform_resim(recording_dir: str, policy: str, config_path: str | None) -> dict:
    logging.info(f"开始执行重仿真任务: 录制 {recording_dir}, 策略 {policy}")
    cfg = load_experiment_config(config_path)
    report, summary = experiment.resim(cfg, recording_dir, policy)
    return {"summary": summary, "steps": report.steps, "failures": [asdict(f) for f in report.failures]}


def perform_mapa(policy: str, config_path: str | None, seed: int | None) -> dict:
    logging.info(f"开始执行 MAPA 任务: 策略 {policy}")
    cfg = load_experiment_config(config_path, seed)
    return experiment.mapa(cfg, policy)


async def _dispatch(polling: bool, background_tasks: BackgroundTasks, kind: str, func, *args):
    if not polling:
        try:
            result = await run_in_threadpool(func, *args)
            return task_schemas.FinalOutput(output=result)
        except Exception as e:
            logging.error(f"{kind} 处理失败: {e}", exc_info=True)
            raise HTTPException(status_code=500, detail=f"处理失败: {str(e)}")
    task_id = task_manager.create_task(kind)
    background_tasks.add_task(task_manager.run_task_in_background, task_id, func, *args)
    return task_schemas.TaskCreationResponse(task_id=task_id)


@router.post("/resim",
             response_model=Union[task_schemas.FinalOutput, task_schemas.TaskCreationResponse],
             tags=["Evaluation"],
             summary="在一段录制上做闭环重仿真")
async def resim(request: task_schemas.ResimRequest, background_tasks: BackgroundTasks):
    """返回指标摘要（MDBF、精度、舒适度、故障列表），或轮询模式下的任务ID。"""
    return await _dispatch(request.polling, background_tasks, "resim", perform_resim,
                           request.recording_dir, request.policy, request.config_path)


@router.post("/mapa",
             response_model=Union[task_schemas.FinalOutput, task_schemas.TaskCreationResponse],
             tags=["Evaluation"],
             summary="左/右偏置录制上的 MAPA 实验")
async def mapa(request: task_schemas.MapaRequest, background_tasks: BackgroundTasks):
    return await _dispatch(request.polling, background_tasks, "mapa", perform_mapa,
                           request.policy, request.config_path, request.seed)
