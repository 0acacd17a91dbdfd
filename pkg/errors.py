"""
errors.py — Hiérarchie d'exceptions du toolkit de distillation audio.

Toutes les erreurs "métier" héritent de ValueError (via AudioDistillError)
pour que les appelants existants qui attrapent ValueError, dont le service
HTTP, continuent de fonctionner.
"""


class AudioDistillError(ValueError):
    """Racine des erreurs du toolkit."""


class WavFormatError(AudioDistillError):
    """En-tête RIFF/WAVE invalide ou fichier tronqué."""


class UnsupportedCodecError(AudioDistillError):
    """Codec WAV non supporté (seuls PCM 16 bits et float 32 sont acceptés)."""


class PreconditionError(AudioDistillError):
    """Entrée qui viole un prérequis documenté (ex: échantillons NaN)."""


class TooShortError(AudioDistillError):
    """Signal plus court qu'une trame d'analyse."""


class ParameterError(AudioDistillError):
    """Paramètre de configuration invalide."""


class ShapeError(AudioDistillError):
    """Formes de tenseurs incompatibles."""


class ManifestError(AudioDistillError):
    """Manifeste de dataset incohérent (labels, chemins, en-tête)."""


class StagnantTeacherError(AudioDistillError):
    """Dénominateur de la perte de trajectoire dégénéré: le teacher n'a pas bougé."""


class BufferIntegrityError(AudioDistillError):
    """Buffer de trajectoires incohérent (architectures ou longueurs)."""


class ContractError(RuntimeError):
    """Mauvaise utilisation du moteur de différentiation (ex: perte non scalaire)."""


class ArtifactFormatError(AudioDistillError):
    """Fichier d'artefact (features, checkpoint, distilled set) illisible ou incohérent."""
