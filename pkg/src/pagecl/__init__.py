"""Past-agnostic generative replay for domain-incremental tabular classification.

Modules:

* ``nn``         dense MLP, momentum SGD, checkpoints
* ``gmm``        Gaussian mixtures fit by EM, BIC, sampling
* ``sdg``        synthetic data generation with pseudo labels
* ``replay``     balanced real / synthetic training with a loss ledger
* ``conformal``  ICP and extended ICP with confidence and credibility
* ``datapipe``   windowing, scaling, PCA, SMOTE, domain and temporal splits
* ``metrics``    accuracy, F1, backward transfer, conformal confusion
* ``experiment`` the multi-domain protocol; ``cli`` drives it
"""

__version__ = "0.1.0"
