"""Why softmax1 can leave a token alone.

When no key is relevant every score is very negative. Plain softmax still has
to hand out a full unit of attention, so it piles the mass onto whichever key
is least bad. softmax1 lets the whole column go to (nearly) zero.
"""
import numpy as np

from outlierfree.attention import softmax, softmax1

scores = np.array([-9.0, -8.5, -12.0, -7.9])
print("scores        ", scores)
print("softmax       ", np.round(softmax(scores), 4), "sum", softmax(scores).sum())
print("softmax1      ", np.round(softmax1(scores), 6), "sum", round(softmax1(scores).sum(), 6))

# one informative key: both agree closely
scores[1] = 6.0
print("with a match  ", np.round(softmax(scores), 4), np.round(softmax1(scores), 4))
