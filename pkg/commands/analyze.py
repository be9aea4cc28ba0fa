"""analyze: 参数量、FLOPs 与模型体积"""

import json
import logging
from pathlib import Path

from analysis.complexity import analyze, count_params
from commands.common import add_model_args, resolve_config
from models.config import PRESETS, apply_preset
from models.detector import build_model

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("analyze", help="统计参数量与 FLOPs")
    add_model_args(parser)
    parser.add_argument("--preset", choices=sorted(PRESETS), help="消融预设")
    parser.add_argument("--ablation", action="store_true", help="依次统计全部消融预设")
    parser.add_argument("--depth", type=int, default=2, help="逐层汇总的模块层级深度")
    parser.add_argument("--no-flops", action="store_true", help="只统计参数，不跑前向")
    parser.add_argument("--output", help="把报告写成 JSON")
    parser.set_defaults(handler=run)


def run(args, settings) -> int:
    config = resolve_config(args, settings, preset=args.preset)
    if args.ablation:
        return _run_ablation(args, config)

    model = build_model(config)
    if args.no_flops:
        report = count_params(model, args.depth)
    else:
        report = analyze(model, config.input_size, args.depth)
    print(report.format())
    if args.output:
        Path(args.output).write_text(json.dumps(report.to_dict(), ensure_ascii=False, indent=2), encoding="utf-8")
        logger.info(f"报告已写入 {args.output}")
    return 0


def _run_ablation(args, config) -> int:
    rows = []
    previous = None
    print(f"{'预设':<16}{'参数':>12}{'增量':>10}{'GFLOPs':>10}{'MB':>8}")
    for name in PRESETS:
        preset_config = apply_preset(config, name)
        model = build_model(preset_config)
        if args.no_flops:
            report = count_params(model, args.depth)
        else:
            report = analyze(model, preset_config.input_size, args.depth)
        delta = "" if previous is None else f"{report.total_params - previous:+,}"
        previous = report.total_params
        gflops = "-" if args.no_flops else f"{report.gflops:.2f}"
        print(f"{name:<16}{report.total_params:>12,}{delta:>10}{gflops:>10}{report.size_mb:>8.2f}")
        rows.append({"preset": name, **report.to_dict()})
    if args.output:
        Path(args.output).write_text(json.dumps(rows, ensure_ascii=False, indent=2), encoding="utf-8")
    return 0
