from rest_framework import serializers


class TrainConfigSerializer(serializers.Serializer):
    omega = serializers.IntegerField(required=True)
    alpha = serializers.FloatField(required=True)
    l0 = serializers.FloatField(required=True)
    ema_decay = serializers.FloatField(required=True)
    lr = serializers.FloatField(required=True)
    momentum = serializers.FloatField(required=True)
    batch_size = serializers.IntegerField(required=True)
    iters_per_round = serializers.IntegerField(required=True)
    final_iters = serializers.IntegerField(required=True)
    val_fraction = serializers.FloatField(required=True)
    seed = serializers.IntegerField(required=True)

    def validate_omega(self, value):
        if value < 1:
            raise serializers.ValidationError("Omega must be a positive integer.")
        return value

    def validate_alpha(self, value):
        if value < 0:
            raise serializers.ValidationError("Alpha cannot be negative.")
        return value

    def validate_l0(self, value):
        if value <= 0:
            raise serializers.ValidationError("The branch creation cost l0 must be positive.")
        return value

    def validate_ema_decay(self, value):
        if not 0 < value < 1:
            raise serializers.ValidationError("EMA decay must lie strictly between 0 and 1.")
        return value

    def validate_lr(self, value):
        if value < 0:
            raise serializers.ValidationError("Learning rate cannot be negative.")
        return value

    def validate_momentum(self, value):
        if not 0 <= value < 1:
            raise serializers.ValidationError("Momentum must lie in [0, 1).")
        return value

    def validate_batch_size(self, value):
        if value < 1:
            raise serializers.ValidationError("Batch size must be a positive integer.")
        return value

    def validate_iters_per_round(self, value):
        if value < 1:
            raise serializers.ValidationError("Each round needs at least one iteration.")
        return value

    def validate_final_iters(self, value):
        if value < 0:
            raise serializers.ValidationError("Final iterations cannot be negative.")
        return value

    def validate_val_fraction(self, value):
        if not 0 <= value < 1:
            raise serializers.ValidationError("Validation fraction must lie in [0, 1).")
        return value

    def validate_seed(self, value):
        if value < 0:
            raise serializers.ValidationError("Seed cannot be negative.")
        return value


class SyntheticSpecSerializer(serializers.Serializer):
    task_count = serializers.IntegerField(required=True)
    group_count = serializers.IntegerField(required=True)
    group_assignment = serializers.ListField(child=serializers.IntegerField(min_value=0), required=False)
    input_shape = serializers.ListField(child=serializers.IntegerField(min_value=1), required=True)
    samples = serializers.IntegerField(required=True)
    label_noise = serializers.FloatField(required=True)
    seed = serializers.IntegerField(required=True)
    task_spread = serializers.FloatField(required=True)
    hidden_width = serializers.IntegerField(required=True)
    feature_width = serializers.IntegerField(required=True)

    def validate_task_count(self, value):
        if value < 1:
            raise serializers.ValidationError("Task count must be a positive integer.")
        return value

    def validate_samples(self, value):
        if value < 1:
            raise serializers.ValidationError("Samples must be a positive integer.")
        return value

    def validate_label_noise(self, value):
        if not 0 <= value < 0.5:
            raise serializers.ValidationError("Label noise must lie in [0, 0.5).")
        return value

    def validate_input_shape(self, value):
        if len(value) not in (1, 3):
            raise serializers.ValidationError("Input shape must be D or C,H,W.")
        if len(value) == 3 and (value[1] % 4 or value[2] % 4):
            raise serializers.ValidationError("Image height and width must be divisible by 4.")
        return value

    def validate_task_spread(self, value):
        if value < 0:
            raise serializers.ValidationError("Task spread cannot be negative.")
        return value

    def validate(self, data):
        if not 1 <= data['group_count'] <= data['task_count']:
            raise serializers.ValidationError({'group_count': "Group count must lie between 1 and the task count."})
        assignment = data.get('group_assignment')
        if assignment:
            if len(assignment) != data['task_count']:
                raise serializers.ValidationError({'group_assignment': "One group per task is required."})
            if set(assignment) != set(range(data['group_count'])):
                raise serializers.ValidationError({'group_assignment': "Every group must own at least one task."})
        return data


class RunSerializer(serializers.Serializer):
    id = serializers.IntegerField(read_only=True)
    name = serializers.CharField(max_length=255, required=True)
    out_dir = serializers.CharField(required=True)
    command = serializers.CharField(max_length=64, required=True)
    task_count = serializers.IntegerField(required=True)
    widenings = serializers.IntegerField(required=True)
    param_count = serializers.IntegerField(required=True)

    def validate_name(self, value):
        if not value.strip():
            raise serializers.ValidationError("Run name cannot be empty.")
        return value.strip()

    def validate_widenings(self, value):
        if value < 0:
            raise serializers.ValidationError("Widenings cannot be negative.")
        return value
