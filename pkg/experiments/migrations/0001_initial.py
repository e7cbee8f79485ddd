import django.db.models.deletion
from django.db import migrations, models


class Migration(migrations.Migration):

    initial = True

    dependencies = []

    operations = [
        migrations.CreateModel(
            name='ExperimentRun',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('command', models.CharField(max_length=20)),
                ('out_dir', models.CharField(max_length=500)),
                ('config_digest', models.CharField(max_length=64)),
                ('seed', models.IntegerField(blank=True, null=True)),
                ('status', models.CharField(choices=[('RUNNING', 'Running'), ('COMPLETED', 'Completed'), ('FAILED', 'Failed')], default='RUNNING', max_length=10)),
                ('started_at', models.DateTimeField(auto_now_add=True)),
                ('finished_at', models.DateTimeField(blank=True, null=True)),
            ],
            options={
                'ordering': ['-started_at'],
            },
        ),
        migrations.CreateModel(
            name='RunEvent',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('kind', models.CharField(choices=[('START', 'Start'), ('CHECKPOINT', 'Checkpoint'), ('EARLY_STOP', 'Early stop'), ('COMPLETE', 'Complete'), ('FAILURE', 'Failure')], max_length=12)),
                ('message', models.TextField(blank=True)),
                ('step', models.IntegerField(blank=True, null=True)),
                ('timestamp', models.DateTimeField(auto_now_add=True)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='events', to='experiments.experimentrun')),
            ],
            options={
                'ordering': ['timestamp', 'id'],
            },
        ),
        migrations.CreateModel(
            name='SliceMetric',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('subject_id', models.CharField(max_length=50)),
                ('slice_id', models.IntegerField()),
                ('echo', models.IntegerField()),
                ('weights', models.CharField(default='student', max_length=10)),
                ('dice', models.FloatField()),
                ('iou', models.FloatField()),
                ('accuracy', models.FloatField()),
                ('nsd', models.FloatField()),
                ('hd', models.FloatField()),
                ('empty_surface', models.BooleanField(default=False)),
                ('run', models.ForeignKey(on_delete=django.db.models.deletion.CASCADE, related_name='slice_metrics', to='experiments.experimentrun')),
            ],
            options={
                'ordering': ['weights', 'echo', 'subject_id', 'slice_id'],
            },
        ),
    ]
