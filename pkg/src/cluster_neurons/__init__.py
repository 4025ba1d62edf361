"""Find speaker-related cluster neurons in Transformer FFN layers and prune around them."""

__version__ = "0.1.0"

from .binarize import ActivationPattern, TopPercentBinarizer, binarize_layer, n_active
from .clustering import (ClusterModel, CompositionTable, FrameClusterLabels, KMeans,
                         cluster_composition, kmeans_fit, propagate_labels)
from .exceptions import (BudgetConflictError, ClusterNeuronsError, DataError, FormatError,
                         InputNotFoundError, ManifestError, ParameterError, ReportError,
                         ValidationError)
from .neuron_id import (ClusterNeuronIdentifier, CoOccurrenceTable, build_protected_set,
                        count_cooccurrence, identify_ivector_neurons, identify_ssl_neurons,
                        neuron_count_report)
from .neuron_sets import NeuronSet, load_neuron_sets, save_neuron_sets
from .pruning import (FfnLayer, FfnWeights, MagnitudePruner, MaskSchedule, PruneMask,
                      apply_mask, iterative_schedule, l1_scores, one_shot_baseline_mask,
                      one_shot_protected_mask)
from .synth import SynthSpec, centroid_probe, generate
from .tensor_io import (ActivationStore, LayerActivations, Manifest, ManifestRecord,
                        load_activations, save_activations)
