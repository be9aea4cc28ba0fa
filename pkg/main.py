import argparse
import logging
import sys

from app import create_app
from commands import analyze, cluster_anchors, evaluate, infer, selftest, train_toy
from utils.errors import ConfigError, DataError, HsiNetError, ShapeError, UsageError

logger = logging.getLogger("hsinet")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2

_error_handlers = []


class CliParser(argparse.ArgumentParser):
    """参数错误抛出 UsageError，由 run 统一映射退出码"""

    def error(self, message):
        raise UsageError(message)


def errorhandler(*exc_types):
    def decorator(func):
        _error_handlers.append((exc_types, func))
        return func

    return decorator


# 全局错误处理
@errorhandler(UsageError)
def usage_error(e):
    print(f"用法错误: {e}", file=sys.stderr)
    return EXIT_USAGE


@errorhandler(DataError, ConfigError, ShapeError)
def data_error(e):
    print(f"数据错误: {e}", file=sys.stderr)
    return EXIT_DATA


@errorhandler(HsiNetError)
def internal_error(e):
    print(f"运行失败: {e}", file=sys.stderr)
    return EXIT_DATA


@errorhandler(Exception)
def unexpected_error(e):
    logger.exception(f"未处理的异常: {type(e).__name__}")
    print(f"内部错误: {type(e).__name__}: {e}", file=sys.stderr)
    return EXIT_DATA


def build_parser() -> CliParser:
    parser = CliParser(prog="hsinet", description="HSI-ShipDetectionNet 轻量船只检测")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=CliParser)
    subparsers.required = True
    # 注册子命令
    for command in (analyze, infer, cluster_anchors, evaluate, train_toy, selftest):
        command.register(subparsers)
    return parser


def run(argv=None) -> int:
    settings = create_app()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.handler(args, settings)
    except SystemExit as e:
        # --help / --version
        return e.code if isinstance(e.code, int) else EXIT_OK
    except Exception as e:
        for exc_types, handler in _error_handlers:
            if isinstance(e, exc_types):
                if isinstance(e, HsiNetError):
                    logger.error(f"{type(e).__name__}: {e}", exc_info=logger.isEnabledFor(logging.DEBUG))
                return handler(e)
        raise


if __name__ == "__main__":
    sys.exit(run())
