# src/lane_resim/cli.py
"""
lane-resim 命令行入口。退出码：0 成功，2 配置/参数校验失败，1 运行时错误。
"""
import argparse
import json
import logging
import sys

import uvicorn
from pydantic import ValidationError

from .config import settings, setup_logging
from .schemas.experiment import ConfigError, ExperimentConfig, load_experiment_config
from .services import experiment
from .utils.report_io import write_json

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_VALIDATION = 2


def _common(p: argparse.ArgumentParser, out_required: bool = True, out_help: str = "输出路径"):
    p.add_argument("--config", help="TOML 实验配置文件；省略时使用全部默认值")
    p.add_argument("--seed", type=int, help="覆盖配置中的全局种子")
    p.add_argument("--out", required=out_required, help=out_help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lane-resim", description="车道保持模仿学习的数据生成与闭环评估")
    parser.add_argument("--log-level", default=None, help="覆盖 LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("gen-world", help="生成场景文件"), out_help="场景 JSON")

    p = sub.add_parser("record", help="渲染一段人类驾驶录制")
    _common(p, out_help="录制目录")
    p.add_argument("--recording-id", type=int, default=0)
    p.add_argument("--duration", type=float, default=None, help="录制时长（秒）；默认开到道路尽头")

    p = sub.add_parser("augment", help="构建增强样本库")
    _common(p, out_help="样本库文件")
    p.add_argument("--recording", action="append", default=None, help="录制目录，可重复；省略时按配置现场生成")

    p = sub.add_parser("train", help="在样本库上训练岭回归模型")
    _common(p, out_help="模型文件")
    p.add_argument("--store", required=True)
    p.add_argument("--lambda", dest="ridge_lambda", type=float, default=None)

    p = sub.add_parser("resim", help="闭环重仿真")
    _common(p, out_required=False, out_help="指标摘要 JSON（可选）")
    p.add_argument("--recording", required=True)
    p.add_argument("--policy", required=True, help="oracle | cheater | model:<文件>")
    p.add_argument("--report", required=True, help="重仿真报告 JSON")

    p = sub.add_parser("mapa", help="左/右偏置 MAPA 实验")
    _common(p, out_help="MAPA 结果 JSON")
    p.add_argument("--policy", required=True)

    p = sub.add_parser("report", help="由重仿真报告计算指标摘要")
    _common(p, out_help="指标摘要 JSON")
    p.add_argument("--report", required=True)
    p.add_argument("--csv", default=None, help="另外写出逐步时间序列 CSV")

    p = sub.add_parser("discrepancy", help="人类轨迹偏离中心线的区间报告")
    _common(p, out_help="区间报告 JSON")
    p.add_argument("--recording", required=True)

    _common(sub.add_parser("repro-mapa-story", help="端到端复现 MAPA 对比"), out_help="输出目录")
    _common(sub.add_parser("compare-patches", help="常规 vs 多分辨率图块的 MDBF 对比"), out_help="输出目录")

    p = sub.add_parser("serve", help="启动评估服务")
    p.add_argument("--host", default=settings.HOST_NAME)
    p.add_argument("--port", type=int, default=settings.SERVER_PORT)
    return parser


def _serve(args):
    uvicorn.run("lane_resim.main:app", host=args.host, port=args.port)


def run(args: argparse.Namespace, cfg: ExperimentConfig) -> dict:
    match args.command:
        case "gen-world":
            return experiment.gen_world(cfg, args.out)
        case "record":
            return experiment.record_to_dir(cfg, args.out, args.recording_id, args.duration)
        case "augment":
            return experiment.augment(cfg, args.out, recording_dirs=args.recording)
        case "train":
            return experiment.train(cfg, args.store, args.out, args.ridge_lambda)
        case "resim":
            _, summary = experiment.resim(cfg, args.recording, args.policy, args.report)
            if args.out:
                write_json(args.out, summary)
            return summary
        case "mapa":
            return experiment.mapa(cfg, args.policy, args.out)
        case "report":
            return experiment.report(cfg, args.report, args.out, args.csv)
        case "discrepancy":
            return experiment.discrepancy(cfg, args.recording, args.out)
        case "repro-mapa-story":
            return experiment.repro_mapa_story(cfg, args.out)
        case "compare-patches":
            return experiment.compare_patches(cfg, args.out)
    raise experiment.ExperimentError(f"未知子命令: {args.command}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_VALIDATION
    setup_logging(args.log_level)

    if args.command == "serve":
        _serve(args)
        return EXIT_OK
    try:
        cfg = load_experiment_config(args.config, args.seed)
    except (ConfigError, ValidationError) as e:
        logging.error(f"实验配置无效: {e}")
        return EXIT_VALIDATION

    try:
        result = run(args, cfg)
    except ValidationError as e:
        logging.error(f"参数校验失败: {e}")
        return EXIT_VALIDATION
    except Exception as e:
        logging.error(f"{args.command} 执行失败: {e}", exc_info=True)
        return EXIT_RUNTIME
    print(json.dumps(result, ensure_ascii=False, indent=2, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
