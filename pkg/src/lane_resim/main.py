# src/lane_resim/main.py
import logging
import os
from contextlib import asynccontextmanager

from fastapi import FastAPI

from .config import settings, setup_logging
from .api import router as api_router


@asynccontextmanager
async def lifespan(app: FastAPI):
    # --- 应用启动时执行 ---
    setup_logging()
    for dir_path in [settings.DATA_DIR, settings.TEMP_DIR]:
        if not os.path.exists(dir_path):
            os.makedirs(dir_path)
            logging.info(f"已创建目录: {dir_path}")
    logging.info("重仿真评估服务已启动")

    yield

    logging.info("应用正在关闭...")


app = FastAPI(
    title="车道保持重仿真评估服务",
    description="提交闭环重仿真与 MAPA 实验任务，并轮询结果。",
    version="0.1.0",
    lifespan=lifespan,
)

app.include_router(api_router.router)


@app.get("/", tags=["Health Check"])
def read_root():
    return {"status": "ok", "message": "lane-resim 评估服务运行中"}
