# src/lane_resim/schemas/tasks.py
from typing import Any

from pydantic import BaseModel, Field

# --- 通用任务模型 ---

class TaskCreationResponse(BaseModel):
    """当以轮询模式创建任务时，返回的响应模型"""
    task_id: str = Field(..., description="用于查询任务状态的唯一ID")

class TaskStatusResponse(BaseModel):
    """查询任务状态时的响应模型"""
    task_id: str
    status: str = Field(..., description="任务状态 (pending, processing, completed, failed)")
    result: Any | None = None

# --- API 输入模型 ---

class ResimRequest(BaseModel):
    """闭环重仿真请求"""
    recording_dir: str = Field(..., description="服务端可访问的录制目录")
    policy: str = Field("oracle", description="oracle | cheater | model:<文件>")
    config_path: str | None = Field(None, description="TOML 实验配置；为空时使用默认配置")
    polling: bool = False

class MapaRequest(BaseModel):
    """左/右偏置 MAPA 实验请求"""
    policy: str = Field("oracle", description="oracle | cheater | model:<文件>")
    config_path: str | None = None
    seed: int | None = Field(None, description="覆盖配置中的全局种子")
    polling: bool = True

# --- API 输出模型 ---

class FinalOutput(BaseModel):
    """直接返回结果时的标准输出模型"""
    output: Any
