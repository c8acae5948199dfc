"""python -m counterfactual_strata エントリポイント。"""

from counterfactual_strata.cli import main

main()
