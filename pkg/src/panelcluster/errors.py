"""Exception hierarchy shared across the package."""

from __future__ import annotations


class PanelClusterError(Exception):
    """Base class for all errors raised by panelcluster."""


class PanelFormatError(PanelClusterError):
    """Malformed panel input: unbalanced, duplicated, or unparseable cells."""


class InvalidSpecError(PanelClusterError):
    """A configuration object violates its own preconditions."""


class EmptyGroupError(PanelClusterError):
    """A group has no member units where a nonempty group is required."""


class SingularDesignError(PanelClusterError):
    """A within-group design matrix is rank deficient."""


class DegenerateStartError(PanelClusterError):
    """A k-means start reached an unrepairable configuration."""


class EstimationError(PanelClusterError):
    """Estimation could not produce a valid result."""


class SelectionError(PanelClusterError):
    """Model selection failed (infeasible K range, penalty domain, ...)."""


class SmallGroupWarning(UserWarning):
    """Inference requested for a group too small for reliable asymptotics."""
