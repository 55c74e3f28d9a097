from __future__ import annotations

import sys

import main as core


def main() -> None:
    """プロセスのエントリーポイントとなる関数.

    `core.main()` にコマンドライン引数を渡し、その終了コードでプロセスを終了します。

    使用例:
        $ python app.py reproduce-thresholds
        $ python app.py evaluate --dataset runs/20250101-000000_simulate/dataset --policy trial_sensitive
    """
    sys.exit(core.main(sys.argv[1:]))


if __name__ == "__main__":
    main()
