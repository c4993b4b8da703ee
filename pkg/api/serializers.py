import numpy as np
from rest_framework import serializers

from experiments.models import ExperimentRun
from plant_management.exceptions import WatermarkError
from plant_management.plant import PlantModel
from plant_management.utils import watermark_setting
from watermark_design.design import LqgWeights


class MatrixField(serializers.ListField):
    """
    Row-major nested list of finite numbers, returned as a 2-D float array.
    """

    def __init__(self, **kwargs):
        kwargs.setdefault('child', serializers.ListField(child=serializers.FloatField(), allow_empty=False))
        kwargs.setdefault('allow_empty', False)
        super().__init__(**kwargs)

    def to_internal_value(self, data):
        rows = super().to_internal_value(data)
        if len({len(row) for row in rows}) != 1:
            raise serializers.ValidationError("rows must all have the same length")
        matrix = np.array(rows, dtype=float)
        if not np.all(np.isfinite(matrix)):
            raise serializers.ValidationError("entries must be finite numbers")
        return matrix

    def to_representation(self, value):
        return np.asarray(value, dtype=float).tolist()


class PlantModelSerializer(serializers.Serializer):
    n = serializers.IntegerField(min_value=1)
    m = serializers.IntegerField(min_value=1)
    p = serializers.IntegerField(min_value=1)
    A = MatrixField()
    B = MatrixField()
    C = MatrixField()
    Q = MatrixField()
    R = MatrixField()
    X = MatrixField(required=False)

    def validate(self, data):
        n, m, p = data['n'], data['m'], data['p']
        expected = {
            'A': (n, n),
            'B': (n, p),
            'C': (m, n),
            'Q': (n, n),
            'R': (m, m),
            'X': (m + p, m + p),
        }
        for name, shape in expected.items():
            if name in data and data[name].shape != shape:
                raise serializers.ValidationError(
                    {name: f"expected shape {shape}, got {data[name].shape}"}
                )
        try:
            model = PlantModel(A=data['A'], B=data['B'], C=data['C'], Q=data['Q'], R=data['R']).validate()
            weights = LqgWeights.from_matrix(data['X'], m) if 'X' in data else None
        except WatermarkError as e:
            raise serializers.ValidationError(str(e))
        data['model'], data['weights'] = model, weights
        return data

    def save(self, **kwargs):
        return self.validated_data['model'], self.validated_data['weights']


class DesignRequestSerializer(PlantModelSerializer):
    delta = serializers.FloatField(required=False)
    delta_frac = serializers.FloatField(required=False)

    def validate_delta(self, value):
        if value <= 0:
            raise serializers.ValidationError("must be positive")
        return value

    def validate_delta_frac(self, value):
        if not 0.0 < value <= 1.0:
            raise serializers.ValidationError("must lie in (0, 1]")
        return value

    def validate(self, data):
        if 'delta' in data and 'delta_frac' in data:
            raise serializers.ValidationError("give either delta or delta_frac, not both")
        return super().validate(data)


class ExperimentConfigSerializer(serializers.Serializer):
    kind = serializers.ChoiceField(choices=ExperimentRun.Kind.values, default=ExperimentRun.Kind.SIMULATE)
    seed = serializers.IntegerField(min_value=0, default=0)
    steps = serializers.IntegerField(min_value=0, default=10000)
    nbar = serializers.IntegerField(min_value=1, required=False, allow_null=True, default=None)
    beta = serializers.FloatField(default=lambda: watermark_setting('DEFAULT_BETA', 1.0 / 3.0))
    allow_beta_zero = serializers.BooleanField(default=False)
    delta = serializers.FloatField(required=False, allow_null=True, default=None)
    delta_frac = serializers.FloatField(required=False, allow_null=True, default=None)
    model_path = serializers.CharField(required=False, allow_null=True, allow_blank=False, default=None)
    random = serializers.BooleanField(default=False)
    n = serializers.IntegerField(min_value=1, default=5)
    m = serializers.IntegerField(min_value=1, default=3)
    p = serializers.IntegerField(min_value=1, default=2)
    rho = serializers.FloatField(default=0.9)
    record_start = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    record_len = serializers.IntegerField(min_value=2, required=False, allow_null=True, default=None)
    replay_start = serializers.IntegerField(min_value=0, required=False, allow_null=True, default=None)
    far = serializers.FloatField(default=lambda: watermark_setting('DEFAULT_TARGET_FAR', 0.05))
    fit_every = serializers.IntegerField(min_value=1, default=lambda: watermark_setting('DEFAULT_FIT_EVERY', 1))
    calibration_samples = serializers.IntegerField(
        min_value=1000, default=lambda: watermark_setting('CALIBRATION_SAMPLES', 10000)
    )
    burn_in = serializers.IntegerField(min_value=0, default=lambda: watermark_setting('DEFAULT_BURN_IN', 1000))
    slope_start = serializers.IntegerField(min_value=1, default=lambda: watermark_setting('SLOPE_START', 1000))
    out = serializers.CharField(required=False, allow_null=True, default=None)
    checkpoint_every = serializers.IntegerField(min_value=0, default=0)
    resume = serializers.CharField(required=False, allow_null=True, allow_blank=False, default=None)

    def validate_beta(self, value):
        if not 0.0 <= value < 1.0:
            raise serializers.ValidationError("beta must lie in (0, 1)")
        return value

    def validate_delta(self, value):
        if value is not None and value <= 0:
            raise serializers.ValidationError("delta must be positive")
        return value

    def validate_delta_frac(self, value):
        if value is not None and not 0.0 < value <= 1.0:
            raise serializers.ValidationError("delta_frac must lie in (0, 1]")
        return value

    def validate_rho(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("rho must lie in (0, 1)")
        return value

    def validate_far(self, value):
        if not 0.0 < value < 1.0:
            raise serializers.ValidationError("far must lie in (0, 1)")
        return value

    def validate(self, data):
        if data['beta'] == 0.0 and not data['allow_beta_zero']:
            raise serializers.ValidationError({'beta': "beta must lie in (0, 1)"})
        if data['delta'] is not None and data['delta_frac'] is not None:
            raise serializers.ValidationError("give either delta or delta_frac, not both")
        if bool(data['model_path']) == bool(data['random']):
            raise serializers.ValidationError("give exactly one of a model file or --random")

        schedule = [data['record_start'], data['record_len'], data['replay_start']]
        if any(value is not None for value in schedule) and None in schedule:
            raise serializers.ValidationError(
                "record_start, record_len and replay_start must be given together"
            )
        if data['kind'] == ExperimentRun.Kind.ATTACK_DEMO and None in schedule:
            raise serializers.ValidationError("attack-demo needs a replay schedule")
        return data


class ExperimentRunSerializer(serializers.ModelSerializer):
    class Meta:
        model = ExperimentRun
        fields = [
            'id', 'kind', 'seed', 'config', 'status', 'out_dir',
            'summary', 'error', 'created_at', 'updated_at',
        ]
        read_only_fields = fields


class LearnerCheckpointSerializer(serializers.Serializer):
    version = serializers.IntegerField()
    nbar = serializers.IntegerField(min_value=1)
    beta = serializers.FloatField(min_value=0.0, max_value=1.0)
    delta = serializers.FloatField()
    fit_every = serializers.IntegerField(min_value=1)
    k = serializers.IntegerField(min_value=0)
    weights = MatrixField()
    m = serializers.IntegerField(min_value=1)
    H_bank = serializers.JSONField()
    alpha = serializers.ListField(child=serializers.FloatField())
    lambdas = serializers.JSONField()
    omegas = serializers.JSONField()
    phi_modes = serializers.JSONField()
    W_acc = MatrixField()
    W_cal = MatrixField()
    P_k = MatrixField()
    X_k = MatrixField()
    U_cal = MatrixField()
    U_star = MatrixField()
    weighted_history = serializers.JSONField()
    flags = serializers.DictField(child=serializers.BooleanField())
    gate_failures = serializers.IntegerField(min_value=0)
    rng = serializers.DictField()

    def validate_delta(self, value):
        if value <= 0:
            raise serializers.ValidationError("delta must be positive")
        return value

    def validate(self, data):
        nbar, p = data['nbar'], data['P_k'].shape[0]
        if len(data['alpha']) != nbar:
            raise serializers.ValidationError({'alpha': f"expected {nbar} coefficients"})
        if data['weights'].shape != (data['m'] + p, data['m'] + p):
            raise serializers.ValidationError({'weights': "weight matrix does not match m and p"})
        if 'bit_generator' not in data['rng']:
            raise serializers.ValidationError({'rng': "missing bit generator state"})
        return data
