"""The four-way comparison at a scale that runs in about a minute.

Raw images vs foreground-masked images, natural vs adversarial training,
each scored on clean and PGD-attacked test images. The full desk-scale run
is ``fgmask end2end --seed 1 --epochs-natural 8 --epochs-adv 6 --train-steps 5``.
"""

import io

from fgmask.cli import main

out = io.StringIO()
code = main(["end2end", "--seed", "1", "--samples", "400", "--epochs-natural", "4",
             "--epochs-adv", "2", "--train-steps", "3"], out, io.StringIO())  # training log discarded
print("exit", code)
print(out.getvalue())
# rows: X = raw input, X_FG = masked input; N = natural, A = adversarial training.
# the d_ columns are X_FG minus X for the same training regime.
