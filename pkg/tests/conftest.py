
import pytest

from schema import GroundingSample, NormBox, TaskKind


@pytest.fixture
def make_sample():
    """Factory for valid samples; keyword arguments override the defaults"""

    def factory(id='s1', annotation=None, image_ref='img/screen.png', image_size=(1000, 1000),
                instruction='click the button', source='test', stage_tags=(), pixel_boxes=()):
        annotation = annotation if annotation is not None else NormBox(0.1, 0.2, 0.3, 0.4)
        return GroundingSample(
            id=id,
            image_ref=image_ref,
            image_size=image_size,
            instruction=instruction,
            task=TaskKind.for_annotation(annotation),
            annotation=annotation,
            source=source,
            stage_tags=frozenset(stage_tags),
            pixel_boxes=pixel_boxes,
        )

    return factory


