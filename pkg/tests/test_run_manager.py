"""
Tests for the run manager helpers and subcommands
"""
import json

import numpy as np
import pandas as pd
import pytest

from common import ClusterAssignment, PointCloud, SceneLabels
from config.settings import Settings
from data.scene_loader import SceneDataset, SceneFrame, read_labels
from data.semantic_scheme import PEDESTRIAN_LIKE, ROAD, VEHICLE_LIKE
from errors import ConfigurationError, SceneIOError, SizeMismatchError
from run_manager import (ANALYSIS_TABLES, CLUSTER_REPORT_FILE, LOSS_CURVE_FILE, MODEL_FILE, TRAIN_REPORT_FILE,
                         RunManager, drop_small_clusters, iteration_schedule, resolve_scheme, synth_config)

SMALL = {
    'generation': {'scenes': 2, 'vehicle_count': 1, 'cyclist_count': 1, 'pedestrian_count': 1,
                   'distance_max': 20.0, 'ground_points': 100, 'building_walls': 0, 'clutter_points': 5},
    'clustering': {'seed_count': 200, 'min_instance_points': 5},
    'dynamic_shifting': {'iterations': 2, 'hidden_sizes': '8'},
    'training': {'epochs': 1, 'seed_count': 100, 'learning_rate': 0.01},
    'analysis': {'validation_scenes': 2, 'bandwidth_grid': '0.65, 1.7', 'candidate_sets': '0.2 1.7 3.2; 0.2 2.1 4.0',
                 'iteration_counts': '1, 2', 'sweep_epochs': 1},
}


def small_settings(**run):
    settings = Settings()
    settings.apply(SMALL)
    settings.apply({'run': {k: str(v) if k in ('out', 'data', 'model', 'gt', 'pred') else v
                            for k, v in run.items()}})
    settings.validate()
    return settings


@pytest.fixture
def generated(tmp_path):
    data = tmp_path / 'data'
    RunManager(small_settings(out=data, seed=3)).run('gen')
    return data


def test_resolve_scheme(tmp_path, scheme):
    assert resolve_scheme('synthetic') == scheme
    assert 252 in resolve_scheme('semantic_kitti').remap
    with pytest.raises(SceneIOError):
        resolve_scheme(str(tmp_path / 'absent.ini'))


def test_synth_config_drops_empty_classes():
    settings = small_settings()
    settings.apply({'generation': {'cyclist_count': 0, 'vehicle_count': 3}})
    config = synth_config(settings, seed=11)
    assert config.seed == 11
    assert [(c.name, c.count) for c in config.classes] == [('vehicle-like', 3), ('pedestrian-like', 1)]


def test_iteration_schedule_for_sweeps():
    settings = small_settings()
    settings.apply({'dynamic_shifting': {'loss_weights': '1, 3'}})
    assert iteration_schedule(settings).loss_weights == (1.0, 3.0)
    assert iteration_schedule(settings, 3).loss_weights == (1.0, 1.0, 1.0)


def test_drop_small_clusters():
    assignment = ClusterAssignment(np.array([1, 1, 2, 3, 3, 3, 0]), 3)
    kept = drop_small_clusters(assignment, 2)
    assert kept.labels.tolist() == [1, 1, 0, 2, 2, 2, 0]
    assert kept.num_clusters == 2
    assert drop_small_clusters(assignment, 0) is assignment


def test_map_frames_keeps_order_and_raises_first_failure():
    manager = RunManager(small_settings(jobs=4))
    assert manager._map_frames(lambda i: i * i, 6) == [0, 1, 4, 9, 16, 25]

    def fail(i):
        if i in (2, 4):
            raise ValueError(f"bad {i}")
        return i

    with pytest.raises(ValueError, match='bad 2'):
        manager._map_frames(fail, 6)


def test_frame_inputs_without_sidecar(tiny_scene):
    cloud, labels = tiny_scene
    inputs = RunManager(small_settings()).frame_inputs(SceneFrame('000000', cloud, labels, None))
    assert inputs.index.tolist() == [0, 1, 2, 3, 4]
    assert np.array_equal(inputs.centers, inputs.points)
    assert inputs.features.shape == (5, 7)
    assert np.allclose(inputs.gt_centers[3], [5.0, 5.0, 1.0])


def test_frame_inputs_without_labels(tiny_scene):
    cloud, _ = tiny_scene
    inputs = RunManager(small_settings()).frame_inputs(SceneFrame('000000', cloud, None, None))
    assert len(inputs.index) == len(cloud)
    assert inputs.gt_centers is None


def test_cluster_things_heuristics(tiny_scene):
    cloud, labels = tiny_scene
    settings = small_settings()
    settings.apply({'clustering': {'min_instance_points': 2, 'bfs_radius': 1.5}})
    manager = RunManager(settings)
    inputs = manager.frame_inputs(SceneFrame('000000', cloud, labels, None))
    assert manager.cluster_things(inputs, 'bfs').labels.tolist() == [1, 1, 1, 0, 0]
    with pytest.raises(ConfigurationError):
        manager.cluster_things(inputs, 'dynshift')
    with pytest.raises(ConfigurationError):
        manager.cluster_things(inputs, 'hdbscan')


def test_gen_writes_dataset_and_manifest(generated):
    dataset = SceneDataset(generated)
    assert dataset.frame_ids() == ['000000', '000001']
    manifest = dataset.read_manifest()
    assert manifest['seed'] == 3
    assert manifest['config']['generation']['scenes'] == 2
    assert [s['frame'] for s in manifest['scenes']] == ['000000', '000001']
    assert dataset.sidecar_path('000001').exists()


def test_gen_is_reproducible(tmp_path, generated):
    again = tmp_path / 'again'
    RunManager(small_settings(out=again, seed=3, jobs=2)).run('gen')
    for sub, suffix in (('velodyne', '.bin'), ('labels', '.label'), ('sidecar', '.dss')):
        for frame in ('000000', '000001'):
            name = f"{sub}/{frame}{suffix}"
            assert (generated / name).read_bytes() == (again / name).read_bytes(), name


def test_cluster_and_eval(tmp_path, generated):
    out = tmp_path / 'run'
    settings = small_settings(data=generated, out=out)
    settings.apply({'clustering': {'algorithm': 'meanshift'}})
    report = RunManager(settings).run('cluster')
    assert report['algorithm'] == 'meanshift'
    assert len(report['frames']) == 2
    assert (out / CLUSTER_REPORT_FILE).exists()
    pred = read_labels(out / 'predictions' / '000000.label')
    assert len(pred) == report['frames'][0]['points']

    eval_settings = small_settings(gt=generated, pred=out)
    result = RunManager(eval_settings).run('eval')
    assert result.frames == 2
    assert 0.0 <= result.aggregates['pq'] <= 1.0
    saved = json.loads((out / 'report.json').read_text())
    assert saved['fused'] is True
    assert saved['config']['clustering']['algorithm'] == 'dynshift'


def test_eval_of_ground_truth_is_perfect(tmp_path, generated):
    settings = small_settings(gt=generated, pred=generated / 'labels', out=tmp_path / 'eval')
    report = RunManager(settings).run('eval')
    assert report.aggregates['pq'] == pytest.approx(1.0)
    assert report.aggregates['miou'] == pytest.approx(1.0)
    table = pd.read_csv(tmp_path / 'eval' / 'report.csv')
    assert table['name'].iloc[-1] == 'all'


def test_eval_frame_mismatch(tmp_path, generated):
    pred = tmp_path / 'pred'
    pred.mkdir()
    (pred / '000000.label').write_bytes((generated / 'labels' / '000000.label').read_bytes())
    with pytest.raises(SizeMismatchError):
        RunManager(small_settings(gt=generated, pred=pred)).run('eval')

    (pred / '000007.label').write_bytes((generated / 'labels' / '000001.label').read_bytes())
    with pytest.raises(SizeMismatchError):
        RunManager(small_settings(gt=generated, pred=pred)).run('eval')


def test_eval_point_count_mismatch(tmp_path, generated):
    pred = tmp_path / 'pred'
    pred.mkdir()
    (pred / '000000.label').write_bytes((generated / 'labels' / '000000.label').read_bytes())
    (pred / '000001.label').write_bytes((generated / 'labels' / '000001.label').read_bytes()[:-4])
    with pytest.raises(SizeMismatchError, match='predicted labels'):
        RunManager(small_settings(gt=generated, pred=pred)).run('eval')


def test_train_then_cluster_with_model(tmp_path, generated):
    out = tmp_path / 'train'
    report = RunManager(small_settings(data=generated, out=out)).run('train')
    assert (out / MODEL_FILE).exists()
    assert (out / TRAIN_REPORT_FILE).exists()
    curve = pd.read_csv(out / LOSS_CURVE_FILE)
    assert curve['epoch'].tolist() == [0, 1]
    assert list(curve.columns) == ['epoch', 'loss', 'l1', 'l2']
    assert report['scenes'] == 2

    run = tmp_path / 'cluster'
    cluster = RunManager(small_settings(data=generated, out=run, model=out / MODEL_FILE)).run('cluster')
    assert cluster['algorithm'] == 'dynshift'
    assert len(list((run / 'predictions').glob('*.label'))) == 2


def test_train_without_data_generates_scenes(tmp_path):
    settings = small_settings(out=tmp_path, model=tmp_path / 'models' / 'head.dsw')
    settings.apply({'training': {'epochs': 0}})
    report = RunManager(settings).run('train')
    assert report['model'].endswith('head.dsw')
    assert report['initial_loss'] == report['final_loss']


def test_missing_model_is_an_io_error(tmp_path, generated):
    settings = small_settings(data=generated, out=tmp_path, model=tmp_path / 'absent.dsw')
    with pytest.raises(SceneIOError):
        RunManager(settings).run('cluster')


def test_missing_paths(generated):
    with pytest.raises(ConfigurationError, match='run.out'):
        RunManager(small_settings()).run('gen')
    with pytest.raises(ConfigurationError):
        RunManager(small_settings(gt=generated)).run('eval')


@pytest.mark.slow
def test_analyze_writes_every_table(tmp_path):
    tables = RunManager(small_settings(out=tmp_path)).run('analyze')
    for name in ANALYSIS_TABLES:
        assert (tmp_path / f"{name}.csv").exists()
        assert name in tables
    assert len(tables['bandwidth_sweep']) == 2
    assert tables['iteration_sweep']['iterations'].tolist() == [1, 2]
    assert 'l2' in tables['iteration_sweep'].columns
    styles = tables['learning_style']
    assert styles['style'].tolist() == ['weighted', 'direct']
    assert {'pq', 'pq_th', 'final_loss'} <= set(styles.columns)
    assert styles['pq_th'].between(0.0, 1.0).all()
    assert tables['clustering_comparison']['method'].tolist() == ['bfs', 'dbscan', 'meanshift', 'meanshift',
                                                                 'dynshift']
    report = json.loads((tmp_path / 'analysis_report.json').read_text())
    assert len(report['tables']) == len(ANALYSIS_TABLES)


def test_predictions_carry_fused_semantics(scheme):
    settings = small_settings()
    manager = RunManager(settings)
    semantic = np.array([VEHICLE_LIKE, VEHICLE_LIKE, PEDESTRIAN_LIKE, ROAD])
    assignment = ClusterAssignment(np.array([1, 1, 1]), 1)
    prediction = manager._prediction(semantic, np.array([0, 1, 2]), assignment)
    assert prediction.semantic.tolist() == [VEHICLE_LIKE] * 3 + [ROAD]
    assert prediction.instance.tolist() == [1, 1, 1, 0]


def test_train_reruns_write_identical_models(tmp_path, generated):
    first, second = tmp_path / 'a', tmp_path / 'b'
    RunManager(small_settings(data=generated, out=first)).run('train')
    RunManager(small_settings(data=generated, out=second, jobs=3)).run('train')
    assert (first / MODEL_FILE).read_bytes() == (second / MODEL_FILE).read_bytes()
    assert (first / LOSS_CURVE_FILE).read_bytes() == (second / LOSS_CURVE_FILE).read_bytes()


def test_uniform_head_bandwidth_is_the_candidate_mean():
    manager = RunManager(small_settings())
    scenes = manager.generate_scenes(2, 5)
    model = manager.uniform_model(scenes[0].features.shape[1])
    by_class, by_iteration = manager.bandwidth_tables(scenes, model)
    mean = np.mean(model.bank.candidates)
    assert not by_class.empty
    assert by_class['mean_bandwidth'].tolist() == pytest.approx([mean] * len(by_class))
    assert by_iteration['mean_bandwidth'].tolist() == pytest.approx([mean] * len(by_iteration))


def test_one_class_dataset_gives_one_bandwidth_row():
    settings = small_settings()
    settings.apply({'generation': {'vehicle_count': 2, 'cyclist_count': 0, 'pedestrian_count': 0}})
    manager = RunManager(settings)
    scenes = manager.generate_scenes(2, 5)
    by_class, _ = manager.bandwidth_tables(scenes, manager.uniform_model(scenes[0].features.shape[1]))
    assert by_class['class_id'].tolist() == [VEHICLE_LIKE]
