from rest_framework import serializers

from .models import SliceMetric


class StrictSerializer(serializers.Serializer):
    """Rejects keys the serializer does not declare."""

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError({key: ['Unknown setting.'] for key in unknown})
        return super().to_internal_value(data)


def _positive(name, value):
    if value is not None and value <= 0:
        raise serializers.ValidationError({name: 'Must be greater than zero.'})


class PhantomSectionSerializer(StrictSerializer):
    subjects = serializers.IntegerField(min_value=2)
    slices_per_subject = serializers.IntegerField(min_value=1)
    height = serializers.IntegerField(min_value=64)
    width = serializers.IntegerField(min_value=64)
    pixel_spacing = serializers.ListField(child=serializers.FloatField(), min_length=2, max_length=2)
    te_ms = serializers.ListField(child=serializers.FloatField(), min_length=1)
    noise_sigma = serializers.FloatField(min_value=0)
    source_echo = serializers.IntegerField(min_value=1)
    target_echoes = serializers.ListField(child=serializers.IntegerField(min_value=1))
    mae_echoes = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_null=True)
    mae_echo_count = serializers.IntegerField(min_value=0)
    test_subjects = serializers.IntegerField(min_value=1)
    mae_subjects = serializers.IntegerField(min_value=0)
    validation_fraction = serializers.FloatField(min_value=0, max_value=1)
    workers = serializers.IntegerField(min_value=1)

    def validate(self, data):
        te_ms = data['te_ms']
        if any(t <= 0 for t in te_ms) or any(b <= a for a, b in zip(te_ms, te_ms[1:])):
            raise serializers.ValidationError({'te_ms': 'Echo times must be positive and strictly increasing.'})
        for spacing in data['pixel_spacing']:
            _positive('pixel_spacing', spacing)
        echoes = [data['source_echo'], *data['target_echoes'], *(data['mae_echoes'] or [])]
        if max(echoes) > len(te_ms):
            raise serializers.ValidationError({'te_ms': f'Echo index {max(echoes)} exceeds {len(te_ms)} echoes.'})
        if data['source_echo'] in data['target_echoes']:
            raise serializers.ValidationError({'target_echoes': 'The source echo cannot also be a target.'})
        return data


class DataprepSectionSerializer(StrictSerializer):
    crop_fraction = serializers.FloatField(max_value=1)
    view_size = serializers.IntegerField(min_value=64)
    augment_prob = serializers.FloatField(min_value=0, max_value=1)
    jitter_gain = serializers.FloatField(min_value=0)
    jitter_offset = serializers.FloatField(min_value=0)
    percentile = serializers.FloatField(max_value=100)

    def validate(self, data):
        _positive('crop_fraction', data['crop_fraction'])
        _positive('percentile', data['percentile'])
        if data['view_size'] % 8:
            raise serializers.ValidationError({'view_size': 'Must be a multiple of 8.'})
        return data


class NetworksSectionSerializer(StrictSerializer):
    depth = serializers.IntegerField(min_value=1)
    embed_dim = serializers.IntegerField(min_value=4)
    num_heads = serializers.IntegerField(min_value=1)
    patch_size = serializers.IntegerField(min_value=1)
    mlp_ratio = serializers.FloatField()
    decoder_dim = serializers.IntegerField(min_value=4)
    decoder_depth = serializers.IntegerField(min_value=1)
    aspp_channels = serializers.IntegerField(min_value=1)
    aspp_dilations = serializers.ListField(child=serializers.IntegerField(min_value=1), min_length=1)
    num_classes = serializers.ChoiceField(choices=[2])

    def validate(self, data):
        _positive('mlp_ratio', data['mlp_ratio'])
        for name in ('embed_dim', 'decoder_dim'):
            if data[name] % data['num_heads'] or data[name] % 4:
                raise serializers.ValidationError({name: 'Must be divisible by num_heads and by 4.'})
        return data


class LossSectionSerializer(StrictSerializer):
    beta = serializers.FloatField(min_value=0)
    gamma_glc = serializers.FloatField(min_value=0)
    delta_glc = serializers.FloatField(min_value=0)
    gamma_sc_mae = serializers.FloatField(min_value=0)
    gamma_sc_mpl = serializers.FloatField(min_value=0)
    lambda_enc = serializers.FloatField(min_value=0)
    lambda_dec = serializers.FloatField(min_value=0)
    epsilon = serializers.FloatField()
    dice_smooth = serializers.FloatField(min_value=0)
    paper_literal_cosine = serializers.BooleanField()

    def validate(self, data):
        _positive('epsilon', data['epsilon'])
        return data


class MaeSectionSerializer(StrictSerializer):
    epochs = serializers.IntegerField(min_value=1)
    max_steps = serializers.IntegerField(min_value=1, allow_null=True)
    lr = serializers.FloatField()
    weight_decay = serializers.FloatField(min_value=0)
    beta1 = serializers.FloatField(min_value=0, max_value=0.999999)
    beta2 = serializers.FloatField(min_value=0, max_value=0.999999)
    batch_size = serializers.IntegerField(min_value=1)
    mask_ratio = serializers.FloatField(min_value=0, max_value=0.999999)
    gamma_sc = serializers.FloatField(min_value=0)
    cos_weight = serializers.FloatField(min_value=0)
    lr_schedule = serializers.ChoiceField(choices=['constant', 'cosine'])
    augment = serializers.BooleanField()
    checkpoint_every = serializers.IntegerField(min_value=1)
    log_every = serializers.IntegerField(min_value=1)

    def validate(self, data):
        _positive('lr', data['lr'])
        return data


class MplSectionSerializer(StrictSerializer):
    epochs = serializers.IntegerField(min_value=1)
    warmup_epochs = serializers.IntegerField(min_value=0)
    patience = serializers.IntegerField(min_value=1)
    max_steps = serializers.IntegerField(min_value=1, allow_null=True)
    lr = serializers.FloatField()
    weight_decay = serializers.FloatField(min_value=0)
    batch_size = serializers.IntegerField(min_value=1)
    mask_ratio = serializers.FloatField(min_value=0, max_value=0.999999)
    target_echo = serializers.IntegerField(min_value=1)
    ema_stages = serializers.ListField(child=serializers.ListField(min_length=2, max_length=2), min_length=1)
    sc_decoder_source = serializers.ChoiceField(choices=['segmentation', 'reconstruction'])
    augment = serializers.BooleanField()
    panel_every = serializers.IntegerField(min_value=1)
    log_every = serializers.IntegerField(min_value=1)

    def validate_ema_stages(self, stages):
        thresholds = [threshold for threshold, _ in stages]
        alphas = [alpha for _, alpha in stages]
        if thresholds[-1] is not None or any(t is None for t in thresholds[:-1]):
            raise serializers.ValidationError('Only the last stage may be open-ended (null threshold).')
        bounded = thresholds[:-1]
        if any(b <= a for a, b in zip(bounded, bounded[1:])) or any(t <= 0 for t in bounded):
            raise serializers.ValidationError('Stage thresholds must be positive and strictly increasing.')
        if any(not 0 < a < 1 for a in alphas) or any(b < a for a, b in zip(alphas, alphas[1:])):
            raise serializers.ValidationError('Alphas must lie in (0, 1) and never decrease.')
        return [[None if t is None else int(t), float(a)] for t, a in stages]

    def validate(self, data):
        _positive('lr', data['lr'])
        if data['warmup_epochs'] >= data['epochs']:
            raise serializers.ValidationError({'warmup_epochs': 'Warm-up must end before the last epoch.'})
        return data


class EvaluationSectionSerializer(StrictSerializer):
    nsd_tolerance = serializers.FloatField(min_value=0)
    hd_percentile = serializers.FloatField(min_value=0, max_value=100, allow_null=True)
    connectivity = serializers.ChoiceField(choices=[4, 8])
    echoes = serializers.ListField(child=serializers.IntegerField(min_value=1), allow_null=True)


class SeedsSectionSerializer(StrictSerializer):
    phantom = serializers.IntegerField(min_value=0)
    data = serializers.IntegerField(min_value=0)
    model = serializers.IntegerField(min_value=0)


class OutputSectionSerializer(StrictSerializer):
    dataset_dir = serializers.CharField()
    runs_dir = serializers.CharField()
    deterministic = serializers.BooleanField()
    device = serializers.CharField()


class RunConfigSerializer(StrictSerializer):
    phantom = PhantomSectionSerializer()
    dataprep = DataprepSectionSerializer()
    networks = NetworksSectionSerializer()
    loss = LossSectionSerializer()
    mae = MaeSectionSerializer()
    mpl = MplSectionSerializer()
    evaluation = EvaluationSectionSerializer()
    seeds = SeedsSectionSerializer()
    output = OutputSectionSerializer()

    def validate(self, data):
        echo_count = len(data['phantom']['te_ms'])
        if data['mpl']['target_echo'] > echo_count:
            raise serializers.ValidationError({'mpl': {'target_echo': f'Only {echo_count} echoes exist.'}})
        return data


class SliceMetricSerializer(serializers.ModelSerializer):
    """Column contract of ``metrics.csv``."""

    class Meta:
        model = SliceMetric
        fields = ['subject_id', 'slice_id', 'echo', 'weights', 'dice', 'iou', 'accuracy', 'nsd', 'hd',
                  'empty_surface']
